//! The Data Leader: a ReAct loop that reasons over the question, sends
//! tasks to the two teams, reads their observations and stops with a final
//! answer, a clarification request, or a timeout summary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::ChartSpec;
use crate::agents::{prompts, request, run_team, Team, TeamOptions, TeamReport};
use crate::config::{EngineConfig, LeaderSettings};
use crate::graphquery::SubgraphView;
use crate::llm::{LlmError, LlmPort, Message, Metered, Usage};
use crate::workspace::Workspace;

const LEADER_PROMPT: &str = include_str!("../assets/prompts/leader.v1.txt");
const ARBITRATION_PROMPT: &str = include_str!("../assets/prompts/arbitration.v1.txt");
/// Length of an old non-team observation once reduced to a digest.
const DIGEST_CHARS: usize = 160;
/// Team results quoted in a timeout summary.
const TIMEOUT_EVIDENCE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    DatabaseTeam,
    KnowledgeGraphTeam,
    Arbitrate,
    ClarifyUser,
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::DatabaseTeam,
        Action::KnowledgeGraphTeam,
        Action::Arbitrate,
        Action::ClarifyUser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Action::DatabaseTeam => "database_team",
            Action::KnowledgeGraphTeam => "knowledge_graph_team",
            Action::Arbitrate => "arbitrate",
            Action::ClarifyUser => "clarify_user",
        }
    }

    pub fn from_name(name: &str) -> Option<Action> {
        let n = name
            .trim()
            .trim_matches(|c| matches!(c, '`' | '[' | ']' | '"' | '\'' | '*'));
        Action::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(n.trim()))
    }

    pub fn team(self) -> Option<Team> {
        match self {
            Action::DatabaseTeam => Some(Team::DatabaseTeam),
            Action::KnowledgeGraphTeam => Some(Team::KnowledgeGraphTeam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReactBlock {
    Step {
        thought: String,
        action: Action,
        input: String,
    },
    Final {
        thought: String,
        answer: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ParseError(pub String);

#[derive(Clone, Copy, PartialEq)]
enum Label {
    Thought,
    Action,
    Input,
    Final,
    Observation,
}

/// Longest labels first so `Action Input:` is not read as `Action:`.
const LABELS: [(&str, Label); 5] = [
    ("action input:", Label::Input),
    ("final answer:", Label::Final),
    ("observation:", Label::Observation),
    ("thought:", Label::Thought),
    ("action:", Label::Action),
];

fn split_label(line: &str) -> Option<(Label, &str)> {
    let t = line.trim_start().trim_start_matches(['*', '#', ' ']);
    LABELS.iter().find_map(|(l, kind)| {
        let head = t.get(..l.len())?;
        head.eq_ignore_ascii_case(l)
            .then(|| (*kind, t[l.len()..].trim_start_matches('*').trim()))
    })
}

/// Reads one leader reply. Fields run from their label to the next label;
/// anything from an `Observation:` line on is ignored, since observations
/// come from the teams, not the model.
pub fn parse_react_block(text: &str) -> Result<ReactBlock, ParseError> {
    let mut fields: Vec<(Label, String)> = Vec::new();
    for line in text.lines() {
        match split_label(line) {
            Some((Label::Observation, _)) => break,
            Some((label, rest)) => {
                if fields.iter().any(|(l, _)| *l == label) {
                    return Err(ParseError("reply repeats a field; give one step per reply".into()));
                }
                fields.push((label, rest.to_string()));
            }
            None => {
                if let Some((_, body)) = fields.last_mut() {
                    body.push('\n');
                    body.push_str(line);
                }
            }
        }
    }
    let get = |l: Label| fields.iter().find(|(x, _)| *x == l).map(|(_, b)| b.trim().to_string());
    let thought = get(Label::Thought).unwrap_or_default();
    match (get(Label::Action), get(Label::Final)) {
        (Some(_), Some(_)) => Err(ParseError(
            "reply contains both an Action and a Final Answer; give exactly one".into(),
        )),
        (None, None) => Err(ParseError("reply has neither an Action nor a Final Answer".into())),
        (None, Some(answer)) => {
            if answer.is_empty() {
                return Err(ParseError("Final Answer is empty".into()));
            }
            Ok(ReactBlock::Final { thought, answer })
        }
        (Some(name), None) => {
            let action = Action::from_name(&name).ok_or_else(|| {
                let valid: Vec<&str> = Action::ALL.iter().map(|a| a.name()).collect();
                ParseError(format!(
                    "unknown action `{name}`; valid actions are {}",
                    valid.join(", ")
                ))
            })?;
            let input = get(Label::Input).unwrap_or_default();
            if input.is_empty() && action.team().is_some() {
                return Err(ParseError(format!("Action Input for {} is empty", action.name())));
            }
            Ok(ReactBlock::Step { thought, action, input })
        }
    }
}

// ---------------------------------------------------------------------------
// Arbitration
// ---------------------------------------------------------------------------

/// One side of a conflict, with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub team: Team,
    pub query: Option<String>,
    pub size: Option<usize>,
    pub observation: String,
}

impl Evidence {
    pub fn from_report(r: &TeamReport, preview_rows: usize) -> Self {
        Self {
            team: r.team,
            query: r.query.clone(),
            size: r.size(),
            observation: r.observation(preview_rows),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    A,
    B,
    Reconcile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub decision: Decision,
    /// The team whose result was chosen, if one was.
    pub chosen: Option<Team>,
    pub resolution: String,
    pub rationale: String,
}

impl Resolution {
    pub fn observation(&self) -> String {
        let decision = match (self.decision, self.chosen) {
            (Decision::Reconcile, _) => "reconcile".to_string(),
            (d, Some(t)) => format!("{} ({t})", if d == Decision::A { "A" } else { "B" }),
            (d, None) => format!("{d:?}"),
        };
        format!(
            "Arbitration decision: {decision}\nResolution: {}\nRationale: {}",
            self.resolution, self.rationale
        )
    }
}

pub fn arbitration_prompt(question: &str, conflict: &str, a: Option<&Evidence>, b: Option<&Evidence>) -> String {
    let side = |e: Option<&Evidence>| -> (String, String, String, String) {
        match e {
            Some(e) => (
                e.team.name().to_string(),
                e.query.clone().unwrap_or_else(|| "unknown query".into()),
                e.size.map_or_else(|| "unknown size".into(), |n| format!("{n} rows")),
                e.observation.clone(),
            ),
            None => (
                "unknown team".into(),
                "unknown query".into(),
                "unknown size".into(),
                "(no result)".into(),
            ),
        }
    };
    let (ta, qa, sa, oa) = side(a);
    let (tb, qb, sb, ob) = side(b);
    prompts::render(
        ARBITRATION_PROMPT,
        &[
            ("question", question),
            (
                "conflict",
                if conflict.trim().is_empty() {
                    "(not described)"
                } else {
                    conflict
                },
            ),
            ("team_a", &ta),
            ("query_a", &qa),
            ("size_a", &sa),
            ("observation_a", &oa),
            ("team_b", &tb),
            ("query_b", &qb),
            ("size_b", &sb),
            ("observation_b", &ob),
        ],
    )
}

/// Reads `Decision:`, `Resolution:` and `Rationale:` lines. A reply without
/// a recognizable decision is treated as a reconciliation whose text is the
/// whole reply.
pub fn parse_resolution(text: &str, a: Option<Team>, b: Option<Team>) -> Resolution {
    let mut decision = None;
    let mut resolution = None;
    let mut rationale = None;
    for line in text.lines() {
        let t = line.trim();
        let field = |label: &str| {
            t.get(..label.len())
                .filter(|h| h.eq_ignore_ascii_case(label))
                .map(|_| t[label.len()..].trim().to_string())
        };
        if let Some(v) = field("decision:") {
            let v = v.to_ascii_lowercase();
            let v = v.trim_start_matches(['<', '(', '"', '\'']);
            decision = Some(
                if v == "a" || v.starts_with("a ") || v.starts_with("a)") || v.starts_with("a>") {
                    Decision::A
                } else if v == "b" || v.starts_with("b ") || v.starts_with("b)") || v.starts_with("b>") {
                    Decision::B
                } else {
                    Decision::Reconcile
                },
            );
        } else if let Some(v) = field("resolution:") {
            resolution = Some(v);
        } else if let Some(v) = field("rationale:") {
            rationale = Some(v);
        }
    }
    let decision = decision.unwrap_or(Decision::Reconcile);
    Resolution {
        decision,
        chosen: match decision {
            Decision::A => a,
            Decision::B => b,
            Decision::Reconcile => None,
        },
        resolution: resolution.unwrap_or_else(|| text.trim().to_string()),
        rationale: rationale.unwrap_or_default(),
    }
}

pub fn arbitrate(
    question: &str,
    conflict: &str,
    a: Option<&Evidence>,
    b: Option<&Evidence>,
    ws: &Workspace,
    llm: &dyn LlmPort,
) -> Result<(Resolution, Usage), LlmError> {
    let prompt = arbitration_prompt(question, conflict, a, b);
    let reply = llm.complete(&request(ws, vec![Message::user(prompt)]))?;
    Ok((
        parse_resolution(&reply.text, a.map(|e| e.team), b.map(|e| e.team)),
        reply.usage,
    ))
}

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    DatabaseTeam,
    KnowledgeGraphTeam,
    Arbitrate,
    ClarifyUser,
    FinalAnswer,
    /// The reply could not be parsed; the observation holds the reason.
    Invalid,
}

impl From<Action> for StepAction {
    fn from(a: Action) -> Self {
        match a {
            Action::DatabaseTeam => StepAction::DatabaseTeam,
            Action::KnowledgeGraphTeam => StepAction::KnowledgeGraphTeam,
            Action::Arbitrate => StepAction::Arbitrate,
            Action::ClarifyUser => StepAction::ClarifyUser,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReActStep {
    pub index: usize,
    pub thought: String,
    pub action: StepAction,
    pub action_input: String,
    pub observation: Option<String>,
    /// The leader's raw reply for this turn.
    pub reply: String,
    pub leader_usage: Usage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub team: Option<TeamReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arbitration: Option<Resolution>,
    /// Spend of the team or arbitration call made in this step.
    pub call_usage: Usage,
}

impl ReActStep {
    pub fn usage(&self) -> Usage {
        self.leader_usage + self.call_usage
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionFinal {
    Answer { text: String },
    Timeout { summary: String },
    Clarification { question: String },
}

impl SessionFinal {
    pub fn text(&self) -> &str {
        match self {
            SessionFinal::Answer { text } => text,
            SessionFinal::Timeout { summary } => summary,
            SessionFinal::Clarification { question } => question,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionTrace {
    pub question: String,
    pub steps: Vec<ReActStep>,
    #[serde(rename = "final")]
    pub final_: SessionFinal,
    pub usage: Usage,
    pub llm_calls: u64,
    pub team_call_counts: BTreeMap<String, u32>,
}

impl SessionTrace {
    pub fn team_calls(&self, team: Team) -> u32 {
        self.team_call_counts.get(team.name()).copied().unwrap_or(0)
    }

    /// The most recent chart or subgraph any team produced.
    pub fn artifacts(&self) -> (Option<&ChartSpec>, Option<&SubgraphView>) {
        let teams = || self.steps.iter().rev().filter_map(|s| s.team.as_ref());
        (
            teams().find_map(|t| t.chart.as_ref()),
            teams().find_map(|t| t.subgraph.as_ref()),
        )
    }
}

fn count_team_calls(steps: &[ReActStep]) -> BTreeMap<String, u32> {
    let mut counts: BTreeMap<String, u32> = [Team::DatabaseTeam, Team::KnowledgeGraphTeam]
        .iter()
        .map(|t| (t.name().to_string(), 0))
        .collect();
    for s in steps {
        if let Some(t) = &s.team {
            *counts.entry(t.team.name().to_string()).or_default() += 1;
        }
    }
    counts
}

/// Incremental view of a session, in trace order.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionEvent {
    Thought {
        step: usize,
        text: String,
    },
    Action {
        step: usize,
        action: StepAction,
        input: String,
    },
    Observation {
        step: usize,
        text: String,
    },
    Error {
        step: usize,
        message: String,
    },
    Chart {
        step: usize,
        spec: ChartSpec,
    },
    Subgraph {
        step: usize,
        view: SubgraphView,
    },
    Final {
        answer: SessionFinal,
    },
}

fn step_events(s: &ReActStep) -> Vec<SessionEvent> {
    let mut out = vec![SessionEvent::Thought {
        step: s.index,
        text: s.thought.clone(),
    }];
    match s.action {
        StepAction::FinalAnswer => {}
        StepAction::Invalid => out.push(SessionEvent::Error {
            step: s.index,
            message: s.observation.clone().unwrap_or_default(),
        }),
        action => {
            out.push(SessionEvent::Action {
                step: s.index,
                action,
                input: s.action_input.clone(),
            });
            if let Some(t) = &s.team {
                if let Some(spec) = &t.chart {
                    out.push(SessionEvent::Chart {
                        step: s.index,
                        spec: spec.clone(),
                    });
                }
                if let Some(view) = &t.subgraph {
                    out.push(SessionEvent::Subgraph {
                        step: s.index,
                        view: view.clone(),
                    });
                }
            }
            if let Some(o) = &s.observation {
                out.push(SessionEvent::Observation {
                    step: s.index,
                    text: o.clone(),
                });
            }
        }
    }
    out
}

/// The event sequence a trace corresponds to; what a live session emits.
pub fn trace_events(trace: &SessionTrace) -> Vec<SessionEvent> {
    let mut out: Vec<SessionEvent> = trace.steps.iter().flat_map(step_events).collect();
    out.push(SessionEvent::Final {
        answer: trace.final_.clone(),
    });
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOptions {
    pub leader: LeaderSettings,
    /// Instruction on the answer's shape, placed in the leader prompt.
    pub answer_format: String,
    pub team: TeamOptions,
    pub digest_rows: usize,
}

impl SessionOptions {
    pub fn from_config(cfg: &EngineConfig) -> Self {
        Self {
            leader: cfg.leader.clone(),
            answer_format: String::new(),
            team: TeamOptions::default(),
            digest_rows: cfg.agents.digest_rows,
        }
    }
}

#[derive(Debug, Error)]
pub enum LeaderError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("LLM unavailable at step {step}: {source}")]
    LlmUnavailable { step: usize, source: LlmError },
    #[error("{0}")]
    Workspace(String),
    #[error("session is not waiting for a clarification")]
    NotPaused,
}

fn leader_system_prompt(ws: &Workspace, opts: &SessionOptions) -> Result<String, LeaderError> {
    let overview = ws.overview().map_err(|e| LeaderError::Workspace(e.to_string()))?;
    let answer_format = if opts.answer_format.trim().is_empty() {
        String::new()
    } else {
        format!("Answer format: {}\n", opts.answer_format.trim())
    };
    Ok(prompts::render(
        LEADER_PROMPT,
        &[
            ("answer_format", &answer_format),
            ("schema", &overview),
            (
                "domain_knowledge",
                ws.config.domain_knowledge.as_deref().unwrap_or("(none)"),
            ),
        ],
    ))
}

fn shorten(text: &str) -> String {
    let line = text.lines().next().unwrap_or("");
    if line.chars().count() <= DIGEST_CHARS && !text.contains('\n') {
        return line.to_string();
    }
    let cut: String = line.chars().take(DIGEST_CHARS).collect();
    format!("{cut} ...")
}

/// The user turn: the question followed by every completed step. Steps
/// older than `full_turns` show digests instead of full observations.
pub fn render_history(question: &str, steps: &[ReActStep], full_turns: usize, digest_rows: usize) -> String {
    let mut out = format!("Question: {question}\n");
    let recent_from = steps.len().saturating_sub(full_turns);
    for (i, s) in steps.iter().enumerate() {
        out.push('\n');
        let observation = s.observation.as_deref().map(|o| {
            if i >= recent_from {
                o.to_string()
            } else {
                match &s.team {
                    Some(t) => t.digest(digest_rows),
                    None => shorten(o),
                }
            }
        });
        if s.action == StepAction::Invalid {
            out.push_str(&format!("(step {}: unparseable reply)\n", s.index));
        } else {
            out.push_str(&format!("Thought: {}\n", s.thought));
            if let StepAction::FinalAnswer = s.action {
                out.push_str(&format!("Final Answer: {}\n", s.action_input));
            } else {
                let name = serde_json::to_value(s.action).ok();
                let name = name.as_ref().and_then(|v| v.as_str()).unwrap_or("");
                out.push_str(&format!("Action: {name}\nAction Input: {}\n", s.action_input));
            }
        }
        if let Some(o) = observation {
            out.push_str(&format!("Observation: {o}\n"));
        }
    }
    out.push_str(if steps.is_empty() {
        "\nBegin."
    } else {
        "\nContinue with the next Thought."
    });
    out
}

fn timeout_summary(steps: &[ReActStep], max_steps: usize, digest_rows: usize) -> String {
    let evidence: Vec<String> = steps
        .iter()
        .filter_map(|s| s.team.as_ref().filter(|t| t.result.is_some()).map(|t| (s.index, t)))
        .rev()
        .take(TIMEOUT_EVIDENCE)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .map(|(i, t)| format!("- step {i} ({}): {}", t.team, t.digest(digest_rows)))
        .collect();
    let mut out = format!("No final answer within {max_steps} steps.");
    if evidence.is_empty() {
        out.push_str(" No evidence was gathered.");
    } else {
        out.push_str(" Best evidence so far:\n");
        out.push_str(&evidence.join("\n"));
    }
    out
}

fn latest_report(steps: &[ReActStep], team: Team) -> Option<&TeamReport> {
    steps
        .iter()
        .rev()
        .filter_map(|s| s.team.as_ref())
        .find(|t| t.team == team)
}

/// Runs one team call for a leader step. Failures come back inside the
/// report; they never abort the session.
pub fn dispatch(
    team: Team,
    input: &str,
    ws: &Workspace,
    llm: &dyn LlmPort,
    opts: &SessionOptions,
) -> (String, TeamReport) {
    let report = run_team(team, input, ws, llm, opts.team);
    (report.observation(opts.digest_rows), report)
}

pub fn run_session(question: &str, ws: &Workspace, llm: &dyn LlmPort) -> Result<SessionTrace, LeaderError> {
    run_session_with(question, &SessionOptions::from_config(&ws.config), ws, llm, &mut |_| {})
}

/// Runs the loop until a final answer, a clarification request or
/// `max_steps` leader turns, calling `on_event` as each piece of the trace
/// becomes known.
pub fn run_session_with(
    question: &str,
    opts: &SessionOptions,
    ws: &Workspace,
    llm: &dyn LlmPort,
    on_event: &mut dyn FnMut(SessionEvent),
) -> Result<SessionTrace, LeaderError> {
    if question.trim().is_empty() {
        return Err(LeaderError::EmptyQuestion);
    }
    drive(question, Vec::new(), opts, ws, llm, on_event)
}

/// Continues a session that stopped for clarification, with the user's
/// reply as the observation of the clarification step.
pub fn resume_session(
    paused: SessionTrace,
    reply: &str,
    opts: &SessionOptions,
    ws: &Workspace,
    llm: &dyn LlmPort,
    on_event: &mut dyn FnMut(SessionEvent),
) -> Result<SessionTrace, LeaderError> {
    if !matches!(paused.final_, SessionFinal::Clarification { .. }) {
        return Err(LeaderError::NotPaused);
    }
    let mut steps = paused.steps;
    let last = steps.last_mut().ok_or(LeaderError::NotPaused)?;
    let text = format!("User clarification: {}", reply.trim());
    on_event(SessionEvent::Observation {
        step: last.index,
        text: text.clone(),
    });
    last.observation = Some(text);
    drive(&paused.question, steps, opts, ws, llm, on_event)
}

fn drive(
    question: &str,
    mut steps: Vec<ReActStep>,
    opts: &SessionOptions,
    ws: &Workspace,
    llm: &dyn LlmPort,
    on_event: &mut dyn FnMut(SessionEvent),
) -> Result<SessionTrace, LeaderError> {
    let metered = Metered::new(llm);
    let prior_usage: Usage = steps.iter().map(ReActStep::usage).sum();
    let prior_calls: u64 = steps
        .iter()
        .map(|s| 1 + s.team.as_ref().map_or(0, |t| t.llm_calls) + u64::from(s.arbitration.is_some()))
        .sum();
    let system = leader_system_prompt(ws, opts)?;
    let max_steps = opts.leader.max_steps.max(1);

    let finish = |steps: Vec<ReActStep>, final_: SessionFinal, on_event: &mut dyn FnMut(SessionEvent)| {
        on_event(SessionEvent::Final { answer: final_.clone() });
        SessionTrace {
            question: question.to_string(),
            team_call_counts: count_team_calls(&steps),
            usage: prior_usage + metered.total_usage(),
            llm_calls: prior_calls + metered.calls(),
            steps,
            final_,
        }
    };

    while steps.len() < max_steps {
        let index = steps.len() + 1;
        let user = render_history(question, &steps, opts.leader.full_history_turns, opts.digest_rows);
        let req = request(ws, vec![Message::system(system.clone()), Message::user(user)]);
        let reply = metered
            .complete(&req)
            .map_err(|source| LeaderError::LlmUnavailable { step: index, source })?;
        let mut step = ReActStep {
            index,
            thought: String::new(),
            action: StepAction::Invalid,
            action_input: String::new(),
            observation: None,
            reply: reply.text.clone(),
            leader_usage: reply.usage,
            team: None,
            arbitration: None,
            call_usage: Usage::default(),
        };
        match parse_react_block(&reply.text) {
            Err(e) => {
                step.observation = Some(format!("ERROR: could not parse reply: {e}"));
                step_events(&step).into_iter().for_each(&mut *on_event);
                steps.push(step);
            }
            Ok(ReactBlock::Final { thought, answer }) => {
                step.thought = thought;
                step.action = StepAction::FinalAnswer;
                step.action_input = answer.clone();
                step_events(&step).into_iter().for_each(&mut *on_event);
                steps.push(step);
                return Ok(finish(steps, SessionFinal::Answer { text: answer }, on_event));
            }
            Ok(ReactBlock::Step { thought, action, input }) => {
                step.thought = thought;
                step.action = action.into();
                step.action_input = input.clone();
                on_event(SessionEvent::Thought {
                    step: index,
                    text: step.thought.clone(),
                });
                on_event(SessionEvent::Action {
                    step: index,
                    action: step.action,
                    input: input.clone(),
                });
                match action {
                    Action::DatabaseTeam | Action::KnowledgeGraphTeam => {
                        let team = action.team().expect("team action");
                        let (observation, report) = dispatch(team, &input, ws, &metered, opts);
                        if let Some(spec) = &report.chart {
                            on_event(SessionEvent::Chart {
                                step: index,
                                spec: spec.clone(),
                            });
                        }
                        if let Some(view) = &report.subgraph {
                            on_event(SessionEvent::Subgraph {
                                step: index,
                                view: view.clone(),
                            });
                        }
                        step.call_usage = report.usage;
                        step.observation = Some(observation);
                        step.team = Some(report);
                    }
                    Action::Arbitrate => {
                        step.observation = Some(if opts.leader.arbitration_enabled {
                            let a = latest_report(&steps, Team::DatabaseTeam)
                                .map(|r| Evidence::from_report(r, opts.digest_rows));
                            let b = latest_report(&steps, Team::KnowledgeGraphTeam)
                                .map(|r| Evidence::from_report(r, opts.digest_rows));
                            match arbitrate(question, &input, a.as_ref(), b.as_ref(), ws, &metered) {
                                Ok((resolution, usage)) => {
                                    step.call_usage = usage;
                                    let o = resolution.observation();
                                    step.arbitration = Some(resolution);
                                    o
                                }
                                Err(e) => format!("ERROR: arbitration failed: {e}"),
                            }
                        } else {
                            format!("Arbitration is disabled; the conflict stands as stated: {input}")
                        });
                    }
                    Action::ClarifyUser => {
                        if opts.leader.clarification_enabled {
                            steps.push(step);
                            let q = if input.trim().is_empty() {
                                "Could you clarify the question?".to_string()
                            } else {
                                input
                            };
                            return Ok(finish(steps, SessionFinal::Clarification { question: q }, on_event));
                        }
                        step.observation =
                            Some("Clarification is disabled; continue with the evidence available.".into());
                    }
                }
                if let Some(o) = &step.observation {
                    on_event(SessionEvent::Observation {
                        step: index,
                        text: o.clone(),
                    });
                }
                steps.push(step);
            }
        }
    }
    let summary = timeout_summary(&steps, max_steps, opts.digest_rows);
    Ok(finish(steps, SessionFinal::Timeout { summary }, on_event))
}
