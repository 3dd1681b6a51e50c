//! Generator of well-formed macro scripts, shared by the round-trip checks.

use ccdaq::client::script::{Arg, Expr, Part, Script, Stmt, StmtKind, Template, WaitTarget};
use proptest::prelude::*;

const NAMES: [&str; 4] = ["a", "exp", "n_2", "obj"];

fn text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z0-9_.-]{1,6}",
        // Characters that need quoting.
        "[ a-z=\"\\\\${};#]{0,6}",
    ]
}

fn template() -> impl Strategy<Value = Template> {
    prop::collection::vec(
        prop_oneof![3 => text().prop_map(Part::Lit), 1 => prop::sample::select(&NAMES[..]).prop_map(|n| Part::Var(n.into()))],
        0..4,
    )
    .prop_map(|parts| {
        // Normalize the way the parser does.
        let mut t: Vec<Part> = Vec::new();
        for p in parts {
            match (t.last_mut(), p) {
                (_, Part::Lit(s)) if s.is_empty() => {}
                (Some(Part::Lit(a)), Part::Lit(b)) => a.push_str(&b),
                (_, p) => t.push(p),
            }
        }
        Template(t)
    })
}

fn expr() -> impl Strategy<Value = Expr> {
    prop_oneof![
        any::<i64>().prop_map(Expr::Int),
        (-1e9f64..1e9).prop_map(Expr::Real),
        (0.0f64..1e5).prop_map(Expr::Duration),
        template().prop_map(Expr::Text),
    ]
}

fn at(kind: StmtKind) -> Stmt {
    Stmt { kind, pos: Default::default() }
}

fn leaf() -> impl Strategy<Value = Stmt> {
    let verb = prop::sample::select(vec!["setup", "observe", "run_cmd", "get", "set", "x-1.b"]);
    let key = "[a-z][a-z0-9_.-]{0,5}";
    let arg = prop_oneof![template().prop_map(Arg::Positional), (key, template()).prop_map(|(k, v)| Arg::Named(k, v))];
    prop_oneof![
        (any::<bool>(), verb, prop::collection::vec(arg, 0..4))
            .prop_map(|(try_, verb, args)| at(StmtKind::Command { try_, verb: verb.into(), args })),
        (prop::sample::select(&NAMES[..]), expr()).prop_map(|(n, value)| at(StmtKind::Let { name: n.into(), value })),
        (any::<bool>(), expr()).prop_map(|(try_, e)| at(StmtKind::Wait { try_, target: WaitTarget::For(e) })),
        (any::<bool>(), "[a-z][a-z-]{0,10}", prop::option::of(expr()))
            .prop_filter("not a keyword", |(_, n, _)| !["let", "repeat", "wait", "print", "try"].contains(&n.as_str()))
            .prop_map(|(try_, name, timeout)| at(StmtKind::Wait { try_, target: WaitTarget::Event { name, timeout } })),
        prop::collection::vec(expr(), 0..3).prop_map(|v| at(StmtKind::Print(v))),
        "[ -~]{0,12}".prop_map(|c| at(StmtKind::Comment(c.trim().to_string()))),
    ]
}

fn stmt() -> impl Strategy<Value = Stmt> {
    leaf().prop_recursive(3, 24, 5, |inner| {
        (0u64..5, prop::collection::vec(inner, 0..5)).prop_map(|(count, body)| at(StmtKind::Repeat { count, body }))
    })
}

pub fn script() -> impl Strategy<Value = Script> {
    prop::collection::vec(stmt(), 0..8).prop_map(|body| {
        // Define every name up front so any use is valid.
        let mut statements: Vec<Stmt> =
            NAMES.iter().map(|n| at(StmtKind::Let { name: n.to_string(), value: Expr::Int(1) })).collect();
        statements.extend(body);
        Script { statements }
    })
}

