use std::path::{Path, PathBuf};
use std::time::Duration;

use ccdaq::client::script::{parse_script, pretty, StmtKind};
use ccdaq::client::{execute, ExecOptions, ExitStatus, Outcome, ServerConnection};
use ccdaq::detector::{DetectorGeometry, SceneModel};
use ccdaq::server::channels::ChannelClient;
use ccdaq::server::config::ControllerEndpoint;
use ccdaq::server::{Server, ServerConfig};
use proptest::prelude::*;

fn config(dir: &Path) -> ServerConfig {
    let mut g = DetectorGeometry::ideal(16, 12);
    g.name = "client-ccd".into();
    g.read_noise = vec![3.0];
    g.bias_level = vec![200];
    let mut c = ServerConfig::embedded(g, SceneModel::flat(10.0), dir);
    if let ControllerEndpoint::Embedded { config, .. } = &mut c.controller {
        config.time_scale = 0.0;
    }
    c
}

fn run_against(server: &Server, text: &str) -> Outcome {
    let client = ChannelClient::connect(server.endpoints()).unwrap();
    let mut conn = ServerConnection::new(client);
    conn.reply_timeout = Duration::from_secs(10);
    let opts = ExecOptions { event_timeout: Duration::from_secs(10), ..ExecOptions::default() };
    execute(text, &mut conn, &mut Vec::new(), opts)
}

fn fits_files(dir: &Path) -> Vec<PathBuf> {
    std::fs::read_dir(dir)
        .map(|r| r.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.extension().is_some_and(|x| x == "fits")).collect())
        .unwrap_or_default()
}

#[test]
fn setup_and_observe_writes_one_file() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(config(dir.path())).unwrap();
    let o = run_against(&server, "let t = 1.5\nsetup type=object exptime=$t seed=3\nobserve\nwait exposure-complete");
    assert_eq!(o.status, ExitStatus::Ok, "{:?} {:?}", o.error, o.transcript);
    assert_eq!(o.transcript[0], "> setup type=object exptime=1.5 seed=3");
    assert_eq!(fits_files(&dir.path().join("data")).len(), 1);
}

#[test]
fn observe_in_standby_fails_unless_tried() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(config(dir.path())).unwrap();
    let o = run_against(&server, "observe\nstatus");
    assert_eq!(o.status, ExitStatus::CommandError);
    assert_eq!(o.transcript.len(), 2);
    assert!(o.transcript[1].starts_with("< ERR not-initialized"), "{:?}", o.transcript);

    let o = run_against(&server, "try observe\nstatus");
    assert_eq!(o.status, ExitStatus::Ok);
    assert!(o.transcript[1].starts_with("< ERR not-initialized"));
    assert!(o.transcript[3].starts_with("< OK state=Standby"), "{:?}", o.transcript);
}

#[test]
fn transcripts_repeat_for_the_same_script_and_seed() {
    let script = "setup type=object exptime=1 n=2 seed=9\nrepeat 2 {\n observe\n wait exposure-complete\n}\nget seed\nget frames_done";
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let server = Server::start(config(dir.path())).unwrap();
        let o = run_against(&server, script);
        assert_eq!(o.status, ExitStatus::Ok, "{:?}", o.error);
        let root = dir.path().display().to_string();
        runs.push(o.transcript.iter().map(|l| l.replace(&root, "<dir>")).collect::<Vec<_>>());
        assert_eq!(fits_files(&dir.path().join("data")).len(), 4);
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn losing_the_server_exits_with_status_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut server = Server::start(config(dir.path())).unwrap();
    let client = ChannelClient::connect(server.endpoints()).unwrap();
    let runner = std::thread::spawn(move || {
        let mut conn = ServerConnection::new(client);
        conn.reply_timeout = Duration::from_secs(5);
        execute("status\nwait 500ms\nstatus", &mut conn, &mut Vec::new(), ExecOptions::default())
    });
    std::thread::sleep(Duration::from_millis(150));
    server.shutdown();
    let o = runner.join().unwrap();
    assert_eq!(o.status, ExitStatus::ConnectionLost, "{:?}", o.transcript);
}

#[test]
fn parse_errors_never_reach_the_server() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(config(dir.path())).unwrap();
    let o = run_against(&server, "setup type=dark\nrepeat x {\nobserve\n}");
    assert_eq!(o.status, ExitStatus::ParseError);
    assert!(o.transcript.is_empty());
    assert_eq!(server.controller_commands(), 0);
}

// ---------------------------------------------------------------------------
// Round trip over generated scripts

#[path = "common/script_gen.rs"]
mod script_gen;
use script_gen::script;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn pretty_printed_scripts_parse_back_identically(s in script()) {
        let text = pretty(&s);
        let back = parse_script(&text).map_err(|d| TestCaseError::fail(format!("{d}\n{text}")))?;
        prop_assert_eq!(&back, &s, "{}", text);
        prop_assert_eq!(pretty(&back), text);
    }

    #[test]
    fn arbitrary_text_never_panics_the_parser(t in "[ -~\n]{0,80}") {
        if let Ok(s) = parse_script(&t) {
            prop_assert_eq!(parse_script(&pretty(&s)).unwrap(), s);
        }
    }
}

#[test]
fn substituted_values_are_never_reparsed() {
    let script = parse_script("let v = \"x y=1 \\\"z\\\"\"\nsetup object=$v $v").unwrap();
    let StmtKind::Command { args, .. } = &script.statements[1].kind else { panic!() };
    assert_eq!(args.len(), 2);
}
