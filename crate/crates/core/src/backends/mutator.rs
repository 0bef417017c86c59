use std::sync::Arc;

use super::{CompletionBackend, CompletionRequest, Message};

/// Edit library for the mock mutator. The mock teacher reads these back out of
/// its prompt to decide what to keep.
pub const DIRECTIVES: [&str; 11] = [
    "Drop narrative input lines that carry no key = value facts.",
    "Remove the agent's intermediate reasoning.",
    "Be concise.",
    "Preserve identifiers used by upcoming tasks.",
    "Omit the system prompt.",
    "Use plain language.",
    "Keep only the plan steps that remain.",
    "Replace the plan with the upcoming tasks.",
    "Avoid repeating information.",
    "Discard thought traces.",
    "Keep the output well formatted.",
];

/// The directive without which compressed runs cannot succeed.
pub const PLANTED_DIRECTIVE: &str = DIRECTIVES[3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutationRequest {
    pub parent_prompt: String,
    pub stats_summary: String,
    pub n: usize,
    pub seed: u64,
}

/// Seeded directive appender.
///
/// Candidate `i` starts from directive `(3·seed + 4·i) mod 11` and advances
/// cyclically past directives already in the parent or already chosen. Once the
/// library is exhausted an emphasis sentence is appended instead, so a child
/// never equals its parent.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockMutator;

impl MockMutator {
    pub fn start_index(seed: u64, i: usize) -> usize {
        let m = DIRECTIVES.len() as u64;
        ((3 * (seed % m) + 4 * (i as u64 % m)) % m) as usize
    }
}

impl super::PromptMutator for MockMutator {
    fn propose(&self, req: &MutationRequest) -> Vec<String> {
        let parent = req.parent_prompt.trim_end();
        let mut chosen: Vec<usize> = Vec::new();
        let mut out = Vec::with_capacity(req.n);
        for i in 0..req.n {
            let start = Self::start_index(req.seed, i);
            let pick = (0..DIRECTIVES.len())
                .map(|off| (start + off) % DIRECTIVES.len())
                .find(|&d| !parent.contains(DIRECTIVES[d]) && !chosen.contains(&d));
            let child = match pick {
                Some(d) => {
                    chosen.push(d);
                    join(parent, DIRECTIVES[d])
                }
                None => join(parent, &format!("Emphasis {}.{}: follow every instruction above.", req.seed, i)),
            };
            out.push(child);
        }
        out
    }
}

fn join(parent: &str, addition: &str) -> String {
    if parent.is_empty() {
        addition.to_string()
    } else {
        format!("{parent} {addition}")
    }
}

/// Asks a completion backend for rewritten prompts, one per block separated by
/// a line holding only `---`.
pub struct LlmMutator {
    backend: Arc<dyn CompletionBackend>,
}

impl LlmMutator {
    pub fn new(backend: Arc<dyn CompletionBackend>) -> Self {
        LlmMutator { backend }
    }

    pub fn request(req: &MutationRequest) -> CompletionRequest {
        let system = "You improve instructions for a model that compresses an agent's working context. \
Propose rewritten instructions that keep every fact the upcoming tasks need while removing everything else. \
Separate candidates with a line containing only ---.";
        let user = format!(
            "CURRENT INSTRUCTIONS:\n{}\n\nPERFORMANCE:\n{}\n\nPropose {} candidate(s).",
            req.parent_prompt, req.stats_summary, req.n
        );
        let mut r = CompletionRequest::new(vec![Message::system(system), Message::user(user)]);
        r.temperature = 0.7;
        r
    }

    pub fn parse_candidates(text: &str, parent: &str, n: usize) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for block in text.split("\n---") {
            let c = block.trim().trim_start_matches("---").trim().to_string();
            if !c.is_empty() && c != parent.trim() && !out.contains(&c) {
                out.push(c);
            }
        }
        out.truncate(n);
        out
    }
}

impl super::PromptMutator for LlmMutator {
    fn propose(&self, req: &MutationRequest) -> Vec<String> {
        match self.backend.complete(&Self::request(req)) {
            Ok(resp) => Self::parse_candidates(&resp.text, &req.parent_prompt, req.n),
            Err(e) => {
                tracing::warn!(error = %e, "prompt mutation failed");
                Vec::new()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendError, CompletionResponse, PromptMutator};

    fn req(parent: &str, seed: u64, n: usize) -> MutationRequest {
        MutationRequest { parent_prompt: parent.into(), stats_summary: String::new(), n, seed }
    }

    #[test]
    fn seed_one_picks_three_and_seven() {
        let out = MockMutator.propose(&req("p0", 1, 2));
        assert_eq!(out, vec![format!("p0 {}", DIRECTIVES[3]), format!("p0 {}", DIRECTIVES[7])]);
        assert_eq!(MockMutator.propose(&req("p0", 1, 1)).len(), 1);
    }

    #[test]
    fn never_returns_parent() {
        for seed in 0..100 {
            // grow a prompt until the library is exhausted and beyond
            let mut parent = "base".to_string();
            for _ in 0..14 {
                let kids = MockMutator.propose(&req(&parent, seed, 3));
                assert_eq!(kids.len(), 3);
                for k in &kids {
                    assert_ne!(k, &parent);
                }
                let mut uniq = kids.clone();
                uniq.dedup();
                assert_eq!(uniq.len(), 3);
                parent = kids[0].clone();
            }
        }
    }

    #[test]
    fn skips_present_directives() {
        let parent = format!("p {}", DIRECTIVES[3]);
        let out = MockMutator.propose(&req(&parent, 1, 1));
        assert_eq!(out[0], format!("{parent} {}", DIRECTIVES[4]));
    }

    struct Fixed(Result<&'static str, BackendError>);

    impl CompletionBackend for Fixed {
        fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
            self.0.clone().map(|t| CompletionResponse::counted(req, t.to_string()))
        }
    }

    #[test]
    fn llm_mutator_parses_and_fails_soft() {
        let m = LlmMutator::new(Arc::new(Fixed(Ok("first idea\n---\np0\n---\nsecond idea\n---\nthird"))));
        assert_eq!(m.propose(&req("p0", 0, 2)), vec!["first idea".to_string(), "second idea".to_string()]);
        let m = LlmMutator::new(Arc::new(Fixed(Err(BackendError::Transport("down".into())))));
        assert!(m.propose(&req("p0", 0, 2)).is_empty());
    }
}
