//! Adversarial replay transcripts for the leader loop: random mixes of
//! valid steps, malformed blocks, stray query text and early exhaustion,
//! never a final answer.

use datafactory_core::config::EngineConfig;
use datafactory_core::ingest::RawTable;
use datafactory_core::leader::{run_session_with, SessionFinal, SessionOptions};
use datafactory_core::llm::ReplayLlm;
use datafactory_core::workspace::{Clock, Workspace};
use rand::seq::SliceRandom;
use rand::Rng;

const CITIES: &[u8] = b"city,population,region\nOslo,700000,east\nBergen,285000,west\nStavanger,145000,west\n";

const POOL: &[&str] = &[
    "Thought: look at the table.\nAction: database_team\nAction Input: largest city in cities",
    "Thought: check the graph.\nAction: knowledge_graph_team\nAction Input: cities in the west region",
    "Thought: compare.\nAction: arbitrate\nAction Input: the teams disagree",
    "Thought: ask.\nAction: clarify_user\nAction Input: which measure?",
    "Thought: hmm.\nAction: sing_a_song\nAction Input: now",
    "Action: database_team",
    "Final Answer without thought",
    "Thought: done?\nFinal",
    "```sql\nSELECT city FROM cities ORDER BY population DESC LIMIT 1\n```",
    "```sql\nDROP TABLE cities\n```",
    "```cypher\nMATCH (r:Record) RETURN r.city\n```",
    "```cypher\nMATCH (r RETURN\n```",
    "```json\n{\"winner\": \"database_team\", \"reason\": \"it ran\"}\n```",
    "",
    "I cannot help with that.",
    "Thought: a\nThought: b\nAction: database_team\nAction Input: x\nAction: knowledge_graph_team",
];

#[derive(Debug)]
pub struct Case {
    pub transcript: Vec<String>,
    pub max_steps: usize,
    pub clarification: bool,
}

pub fn gen_case(rng: &mut impl Rng) -> Case {
    let len = if rng.gen_bool(0.3) {
        rng.gen_range(0..8)
    } else {
        rng.gen_range(40..160)
    };
    Case {
        transcript: (0..len).map(|_| POOL.choose(rng).unwrap().to_string()).collect(),
        max_steps: if rng.gen_bool(0.5) { 20 } else { rng.gen_range(1..=20) },
        clarification: rng.gen_bool(0.3),
    }
}

/// Runs a session on a fresh workspace and returns its serialized outcome
/// plus the number of leader steps (0 on error).
pub fn run(case: &Case) -> (String, usize, bool) {
    let mut cfg = EngineConfig::default();
    cfg.leader.max_steps = case.max_steps;
    cfg.leader.clarification_enabled = case.clarification;
    let ws = Workspace::in_memory(cfg)
        .unwrap()
        .with_clock(Clock::Fixed("2024-01-01T00:00:00Z".into()));
    ws.ingest(&RawTable::from_delimited("cities", CITIES, b',').unwrap(), None)
        .unwrap();
    ws.build_kg("cities", None, None).unwrap();
    let llm = ReplayLlm::scripted(case.transcript.clone());
    let opts = SessionOptions::from_config(&ws.config);
    let mut events = Vec::new();
    let out = run_session_with("which city is the largest?", &opts, &ws, &llm, &mut |e| events.push(e));
    let events = serde_json::to_string(&events).unwrap();
    match out {
        Ok(t) => {
            let answered = matches!(t.final_, SessionFinal::Answer { .. });
            (serde_json::to_string(&t).unwrap() + &events, t.steps.len(), answered)
        }
        Err(e) => (format!("error: {e}") + &events, 0, false),
    }
}

pub fn check_case(seed: u64) -> Result<(), String> {
    let case = gen_case(&mut super::rng(seed));
    let (a, steps, _) = run(&case);
    if steps > case.max_steps {
        return Err(format!("{steps} steps with max_steps {}", case.max_steps));
    }
    let (b, _, _) = run(&case);
    if a != b {
        return Err("two identical runs produced different traces".into());
    }
    Ok(())
}
