use std::time::{Duration, Instant};

use crate::model::{action_matches, Action, MatchMode, State, Trace};
use crate::wire::{ActionRequest, ControlResponse, FailReason, Phase};

/// Identifies one in-flight request; the server uses connection ids.
pub type Ticket = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail { step: usize, reason: FailReason, detail: String, expected_action: Option<Action> },
}

#[derive(Debug, Clone)]
struct Parked {
    ticket: Ticket,
    req: ActionRequest,
}

/// The single replay cursor over one trace.
///
/// All methods are linearized by the caller. `submit` returns every
/// response the submission releases: the requester's own (unless it is
/// parked) and those of parked requests it unblocks or fails.
#[derive(Debug)]
pub struct Cursor {
    trace: Trace,
    step: usize,
    /// Internal action whose begin was granted for the current step.
    open_begin: Option<Ticket>,
    parked: Vec<Parked>,
    granted: Vec<Action>,
    received: Vec<Action>,
    step_since: Instant,
    step_timeout: Duration,
    verdict: Option<Verdict>,
}

impl Cursor {
    pub fn new(trace: Trace, step_timeout: Duration, now: Instant) -> Self {
        let verdict = trace.is_empty().then_some(Verdict::Pass);
        Cursor {
            trace,
            step: 0,
            open_begin: None,
            parked: Vec::new(),
            granted: Vec::new(),
            received: Vec::new(),
            step_since: now,
            step_timeout,
            verdict,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn verdict(&self) -> Option<&Verdict> {
        self.verdict.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.verdict.is_some()
    }

    /// Step actions granted so far; always a prefix of the trace.
    pub fn grant_log(&self) -> &[Action] {
        &self.granted
    }

    /// Atomic and begin requests in arrival order.
    pub fn received_actions(&self) -> &[Action] {
        &self.received
    }

    pub fn parked_count(&self) -> usize {
        self.parked.len()
    }

    /// When the current step times out, if the run is still live.
    pub fn deadline(&self) -> Option<Instant> {
        self.verdict.is_none().then(|| self.step_since + self.step_timeout)
    }

    /// Response for a request arriving after the verdict.
    pub fn final_response(&self) -> Option<ControlResponse> {
        match self.verdict.as_ref()? {
            Verdict::Pass => Some(ControlResponse::Done),
            Verdict::Fail { reason, detail, expected_action, .. } => Some(ControlResponse::Fail {
                reason: *reason,
                detail: detail.clone(),
                expected_action: expected_action.clone(),
            }),
        }
    }

    pub fn submit(&mut self, ticket: Ticket, req: ActionRequest, now: Instant) -> Vec<(Ticket, ControlResponse)> {
        if let Some(resp) = self.final_response() {
            return vec![(ticket, resp)];
        }
        if req.phase != Phase::End {
            self.received.push(req.action.clone());
        }
        let mut out = Vec::new();
        match req.phase {
            Phase::End => self.end(ticket, req, now, &mut out),
            Phase::Begin if self.open_begin.is_some() && self.matches_current(&req) => {
                let detail = format!("second begin for step {} ({})", self.step, req.action);
                self.fail(FailReason::ProtocolError, detail, Some(ticket), &mut out);
            }
            _ if self.open_begin.is_none() && self.matches_current(&req) => {
                self.grant(ticket, req, now, &mut out);
                self.wake_parked(now, &mut out);
            }
            _ => self.parked.push(Parked { ticket, req }),
        }
        out
    }

    /// Fails the run with `Timeout` once the current step has waited too long.
    pub fn check_timeout(&mut self, now: Instant) -> Vec<(Ticket, ControlResponse)> {
        let mut out = Vec::new();
        if self.deadline().is_some_and(|d| now >= d) {
            let expected = &self.trace.steps[self.step].action;
            let detail = if self.open_begin.is_some() {
                format!("no end for begun step {} ({expected}) within {:?}", self.step, self.step_timeout)
            } else {
                format!("no request matched step {} ({expected}) within {:?}", self.step, self.step_timeout)
            };
            self.fail(FailReason::Timeout, detail, None, &mut out);
        }
        out
    }

    /// Fails the run from outside the protocol, e.g. when a node detects
    /// divergence. `step` names an already granted step the failure belongs
    /// to; by default it is the current one.
    pub fn abort(&mut self, reason: FailReason, detail: String, step: Option<usize>) -> Vec<(Ticket, ControlResponse)> {
        let mut out = Vec::new();
        if self.verdict.is_none() {
            self.fail(reason, detail, None, &mut out);
            if let (Some(at), Some(Verdict::Fail { step, expected_action, .. })) = (step, self.verdict.as_mut()) {
                if at < *step {
                    *step = at;
                    *expected_action = Some(self.trace.steps[at].action.clone());
                }
            }
        }
        out
    }

    /// Drops a request whose connection went away.
    pub fn withdraw(&mut self, ticket: Ticket) {
        self.parked.retain(|p| p.ticket != ticket);
    }

    fn current(&self) -> Option<&Action> {
        self.trace.steps.get(self.step).map(|s| &s.action)
    }

    fn matches_current(&self, req: &ActionRequest) -> bool {
        let mode = match req.phase {
            Phase::Atomic => req.mode,
            _ => MatchMode::Verify,
        };
        self.current().is_some_and(|expected| action_matches(&req.action, expected, mode))
    }

    fn post_state(&self) -> &State {
        &self.trace.steps[self.step].post_state
    }

    /// Checks the observed state against the current step's post-state.
    fn state_ok(&mut self, ticket: Ticket, req: &ActionRequest, out: &mut Vec<(Ticket, ControlResponse)>) -> bool {
        let Some(observed) = &req.observed_state else { return true };
        let result = crate::model::state_matches(observed, self.post_state());
        if result.is_ok() {
            return true;
        }
        let detail = format!("after step {} ({}): {result}", self.step, req.action);
        self.fail(FailReason::StateMismatch, detail, Some(ticket), out);
        false
    }

    fn grant(&mut self, ticket: Ticket, req: ActionRequest, now: Instant, out: &mut Vec<(Ticket, ControlResponse)>) {
        let step = &self.trace.steps[self.step];
        let payload = match (req.phase, req.mode) {
            (Phase::Atomic, MatchMode::Drive) => step.action.payload.clone(),
            _ => Default::default(),
        };
        let pass = ControlResponse::Pass {
            step_index: self.step as u64,
            payload,
            expected_state: Some(step.post_state.clone()),
        };
        if req.phase == Phase::Begin {
            self.open_begin = Some(ticket);
            self.step_since = now;
            out.push((ticket, pass));
            return;
        }
        if self.state_ok(ticket, &req, out) {
            out.push((ticket, pass));
            self.advance(now, out);
        }
    }

    fn end(&mut self, ticket: Ticket, req: ActionRequest, now: Instant, out: &mut Vec<(Ticket, ControlResponse)>) {
        let open = self.open_begin.is_some()
            && self.current().is_some_and(|a| a.name == req.action.name && a.node == req.action.node);
        if !open {
            let detail = format!("end of {} without a granted begin at step {}", req.action, self.step);
            self.fail(FailReason::ProtocolError, detail, Some(ticket), out);
            return;
        }
        if self.state_ok(ticket, &req, out) {
            let pass = ControlResponse::Pass {
                step_index: self.step as u64,
                payload: Default::default(),
                expected_state: Some(self.post_state().clone()),
            };
            out.push((ticket, pass));
            self.advance(now, out);
            self.wake_parked(now, out);
        }
    }

    fn advance(&mut self, now: Instant, out: &mut Vec<(Ticket, ControlResponse)>) {
        self.granted.push(self.trace.steps[self.step].action.clone());
        self.step += 1;
        self.open_begin = None;
        self.step_since = now;
        if self.step == self.trace.len() {
            self.verdict = Some(Verdict::Pass);
            out.extend(self.parked.drain(..).map(|p| (p.ticket, ControlResponse::Done)));
        }
    }

    /// Grants parked requests, first arrival first, until none matches.
    fn wake_parked(&mut self, now: Instant, out: &mut Vec<(Ticket, ControlResponse)>) {
        while self.verdict.is_none() && self.open_begin.is_none() {
            let Some(pos) = self.parked.iter().position(|p| self.matches_current(&p.req)) else { break };
            let Parked { ticket, req } = self.parked.remove(pos);
            self.grant(ticket, req, now, out);
        }
    }

    fn fail(
        &mut self,
        reason: FailReason,
        detail: String,
        requester: Option<Ticket>,
        out: &mut Vec<(Ticket, ControlResponse)>,
    ) {
        tracing::debug!(step = self.step, %reason, %detail, "replay failed");
        self.verdict = Some(Verdict::Fail {
            step: self.step,
            reason,
            detail,
            expected_action: self.current().cloned(),
        });
        let resp = self.final_response().expect("verdict just set");
        out.extend(requester.into_iter().chain(self.parked.drain(..).map(|p| p.ticket)).map(|t| (t, resp.clone())));
        if let Some(t) = self.open_begin.take() {
            if Some(t) != requester {
                out.push((t, resp));
            }
        }
    }
}
