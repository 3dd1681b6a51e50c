//! The six-state control machine.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlState {
    Standby,
    Ready,
    Exposing,
    Reading,
    RunCmd,
    Fault,
}

impl ControlState {
    pub const ALL: [ControlState; 6] = [
        ControlState::Standby,
        ControlState::Ready,
        ControlState::Exposing,
        ControlState::Reading,
        ControlState::RunCmd,
        ControlState::Fault,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ControlState::Standby => "Standby",
            ControlState::Ready => "Ready",
            ControlState::Exposing => "Exposing",
            ControlState::Reading => "Reading",
            ControlState::RunCmd => "RunCmd",
            ControlState::Fault => "Fault",
        }
    }
}

impl fmt::Display for ControlState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Client verbs that go through the machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVerb {
    Setup,
    Observe,
    Stop,
    Abort,
    RunCmd,
}

impl ControlVerb {
    pub const ALL: [ControlVerb; 5] =
        [ControlVerb::Setup, ControlVerb::Observe, ControlVerb::Stop, ControlVerb::Abort, ControlVerb::RunCmd];

    pub fn as_str(self) -> &'static str {
        match self {
            ControlVerb::Setup => "setup",
            ControlVerb::Observe => "observe",
            ControlVerb::Stop => "stop",
            ControlVerb::Abort => "abort",
            ControlVerb::RunCmd => "run_cmd",
        }
    }
}

impl fmt::Display for ControlVerb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlVerb {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or(())
    }
}

/// Events raised inside the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InternalEvent {
    IntegrationComplete,
    FrameComplete { frames_remain: bool },
    CmdComplete,
    ControllerFault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsmInput {
    Verb(ControlVerb),
    Event(InternalEvent),
}

impl From<ControlVerb> for FsmInput {
    fn from(v: ControlVerb) -> Self {
        FsmInput::Verb(v)
    }
}

impl From<InternalEvent> for FsmInput {
    fn from(e: InternalEvent) -> Self {
        FsmInput::Event(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefusalCode {
    NotInitialized,
    Busy,
    Idle,
    Fault,
    UnexpectedEvent,
}

impl RefusalCode {
    pub fn as_str(self) -> &'static str {
        match self {
            RefusalCode::NotInitialized => "not-initialized",
            RefusalCode::Busy => "busy",
            RefusalCode::Idle => "idle",
            RefusalCode::Fault => "fault",
            RefusalCode::UnexpectedEvent => "unexpected-event",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Refusal {
    pub code: RefusalCode,
    pub state: ControlState,
}

impl fmt::Display for Refusal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} state={}", self.code.as_str(), self.state)
    }
}

/// Total transition function. A refusal leaves the state where it was.
pub fn transition(state: ControlState, input: impl Into<FsmInput>) -> Result<ControlState, Refusal> {
    use ControlState::*;
    use ControlVerb as V;
    use InternalEvent as E;
    let refuse = |code| Err(Refusal { code, state });
    match (state, input.into()) {
        (_, FsmInput::Event(E::ControllerFault)) => Ok(Fault),

        (Standby | Ready | Fault, FsmInput::Verb(V::Setup)) => Ok(Ready),
        (Standby, FsmInput::Verb(_)) => refuse(RefusalCode::NotInitialized),

        (Ready, FsmInput::Verb(V::Observe)) => Ok(Exposing),
        (Ready, FsmInput::Verb(V::RunCmd)) => Ok(RunCmd),
        (Ready, FsmInput::Verb(V::Stop | V::Abort)) => refuse(RefusalCode::Idle),

        (Exposing | Reading, FsmInput::Verb(V::Stop)) => Ok(Reading),
        (Exposing | Reading | RunCmd, FsmInput::Verb(V::Abort)) => Ok(Ready),
        (Exposing | Reading | RunCmd, FsmInput::Verb(_)) => refuse(RefusalCode::Busy),

        (Fault, FsmInput::Verb(_)) => refuse(RefusalCode::Fault),

        (Exposing, FsmInput::Event(E::IntegrationComplete)) => Ok(Reading),
        (Reading, FsmInput::Event(E::FrameComplete { frames_remain: true })) => Ok(Exposing),
        (Reading, FsmInput::Event(E::FrameComplete { frames_remain: false })) => Ok(Ready),
        (RunCmd, FsmInput::Event(E::CmdComplete)) => Ok(Ready),
        (_, FsmInput::Event(_)) => refuse(RefusalCode::UnexpectedEvent),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ControlState::*;

    #[test]
    fn documented_examples() {
        assert_eq!(transition(Standby, ControlVerb::Setup), Ok(Ready));
        assert_eq!(
            transition(Standby, ControlVerb::Observe),
            Err(Refusal { code: RefusalCode::NotInitialized, state: Standby })
        );
        assert_eq!(transition(Exposing, ControlVerb::Abort), Ok(Ready));
        assert_eq!(transition(Exposing, ControlVerb::Setup).unwrap_err().code, RefusalCode::Busy);
        assert_eq!(transition(Fault, ControlVerb::Setup), Ok(Ready));
    }

    #[test]
    fn stop_finishes_readout() {
        let s = transition(Exposing, ControlVerb::Stop).unwrap();
        assert_eq!(s, Reading);
        assert_eq!(transition(s, InternalEvent::FrameComplete { frames_remain: false }), Ok(Ready));
    }

    #[test]
    fn every_state_reaches_ready_by_abort_then_setup() {
        for s in ControlState::ALL {
            let after_abort = transition(s, ControlVerb::Abort).unwrap_or(s);
            assert_eq!(transition(after_abort, ControlVerb::Setup), Ok(Ready), "from {s}");
        }
    }

    #[test]
    fn fault_from_anywhere() {
        for s in ControlState::ALL {
            assert_eq!(transition(s, InternalEvent::ControllerFault), Ok(Fault));
        }
    }

    #[test]
    fn refusal_names_state() {
        let r = transition(Reading, ControlVerb::Observe).unwrap_err();
        assert_eq!(r.to_string(), "busy state=Reading");
    }
}
