//! External-device plug-ins: child processes speaking a line protocol on
//! stdin/stdout.
//!
//! ```text
//! DESCRIBE      -> OK name=<name> kind=<kind> value=<current>
//! SET <value>   -> OK value=<value>   | ERR <code> <detail>
//! GET           -> OK value=<value>
//! ```

use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::time::Duration;

use crossbeam_channel::Receiver;

use super::config::DeviceSpec;
use super::line;

const REPLY_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, thiserror::Error)]
pub enum DeviceError {
    #[error("device `{0}`: {1}")]
    Io(String, io::Error),
    #[error("device `{0}` did not answer")]
    Timeout(String),
    #[error("device `{0}` refused: {1}")]
    Refused(String, String),
}

/// A running plug-in process.
pub struct DevicePlugin {
    name: String,
    description: String,
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl DevicePlugin {
    pub fn spawn(spec: &DeviceSpec) -> Result<Self, DeviceError> {
        let io_err = |e| DeviceError::Io(spec.name.clone(), e);
        let mut child = Command::new(&spec.command[0])
            .args(&spec.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(io_err)?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = crossbeam_channel::unbounded();
        std::thread::Builder::new()
            .name(format!("device-{}", spec.name))
            .spawn(move || {
                for l in BufReader::new(stdout).lines().map_while(Result::ok) {
                    if tx.send(l).is_err() {
                        break;
                    }
                }
            })
            .map_err(io_err)?;
        let mut plugin = Self { name: spec.name.clone(), description: String::new(), child, stdin, lines };
        plugin.description = plugin.call("DESCRIBE")?;
        Ok(plugin)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    fn call(&mut self, request: &str) -> Result<String, DeviceError> {
        writeln!(self.stdin, "{request}").map_err(|e| DeviceError::Io(self.name.clone(), e))?;
        self.stdin.flush().map_err(|e| DeviceError::Io(self.name.clone(), e))?;
        let reply = self.lines.recv_timeout(REPLY_TIMEOUT).map_err(|_| DeviceError::Timeout(self.name.clone()))?;
        match reply.strip_prefix("OK") {
            Some(rest) => Ok(rest.trim().to_string()),
            None => Err(DeviceError::Refused(self.name.clone(), reply.strip_prefix("ERR ").unwrap_or(&reply).to_string())),
        }
    }

    pub fn set(&mut self, value: &str) -> Result<String, DeviceError> {
        self.call(&format!("SET {}", line::quote(value)))
    }

    pub fn get(&mut self) -> Result<String, DeviceError> {
        self.call("GET")
    }
}

impl Drop for DevicePlugin {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Serves the plug-in protocol for a simple device holding one value.
/// `allowed` restricts the values accepted by `SET`; empty accepts any.
pub fn serve_device(
    name: &str,
    kind: &str,
    allowed: &[String],
    input: impl BufRead,
    mut output: impl Write,
) -> io::Result<()> {
    let mut value = allowed.first().cloned().unwrap_or_else(|| "0".to_string());
    for l in input.lines() {
        let l = l?;
        let reply = match line::parse_line(&l) {
            Err(e) => line::err("parse", e.column),
            Ok(cmd) => match (cmd.verb.to_ascii_uppercase().as_str(), cmd.positional.as_slice()) {
                ("DESCRIBE", []) => line::ok(format!("name={} kind={} value={}", line::quote(name), line::quote(kind), line::quote(&value))),
                ("GET", []) => line::ok(format!("value={}", line::quote(&value))),
                ("SET", [v]) if allowed.is_empty() || allowed.contains(v) => {
                    value = v.clone();
                    line::ok(format!("value={}", line::quote(&value)))
                }
                ("SET", [v]) => line::err("bad-value", format!("`{v}` not in {}", allowed.join(","))),
                ("QUIT", []) => break,
                (verb, _) => line::err("unknown-verb", verb.to_ascii_lowercase()),
            },
        };
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(input: &str, allowed: &[&str]) -> Vec<String> {
        let allowed: Vec<String> = allowed.iter().map(|s| s.to_string()).collect();
        let mut out = Vec::new();
        serve_device("lamp", "switch", &allowed, input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out).unwrap().lines().map(String::from).collect()
    }

    #[test]
    fn protocol() {
        let r = run("DESCRIBE\nSET on\nGET\nSET dim\nFROB\n", &["off", "on"]);
        assert_eq!(r[0], "OK name=lamp kind=switch value=off");
        assert_eq!(r[1], "OK value=on");
        assert_eq!(r[2], "OK value=on");
        assert!(r[3].starts_with("ERR bad-value"));
        assert_eq!(r[4], "ERR unknown-verb frob");
    }

    #[test]
    fn plugin_process_round_trip() {
        // A shell stand-in keeps the test free of the binary build order.
        let script = r#"v=0; while read cmd arg; do case "$cmd" in
            DESCRIBE) echo "OK name=turret kind=filter value=$v";;
            SET) v=$arg; echo "OK value=$v";;
            GET) echo "OK value=$v";;
            *) echo "ERR unknown-verb";; esac; done"#;
        let spec = DeviceSpec { name: "turret".into(), command: vec!["sh".into(), "-c".into(), script.into()] };
        let mut p = DevicePlugin::spawn(&spec).unwrap();
        assert!(p.description().contains("kind=filter"));
        assert_eq!(p.set("3").unwrap(), "value=3");
        assert_eq!(p.get().unwrap(), "value=3");
    }
}
