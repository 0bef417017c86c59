use std::sync::Arc;

use paace::backends::{
    EmbeddingVector, HashEmbedder, JudgeLabel, JudgeVerdict, MockTeacher, RuleJudge, ScriptedAgent, DIRECTIVES,
};
use paace::baselines::{extractive_compress, fifo_compress, retrieval_compress};
use paace::evolution::{EvalResult, VariantStats, DEFAULT_SEED_PROMPT};
use paace::executor::{plan_slice, run_compressed, run_full, CompressorHandle, RunConfig};
use paace::metrics::{dependency_tokens, peak};
use paace::model::{CompressionRecord, ContextState, Plan, TaskKind, TaskStep};
use paace::scoring::{cosine, decide, label_trajectory, LabelInputs, Thresholds, TrajectoryPair};
use paace::supervision::{extract_tuples, read_dataset, write_dataset};
use paace::synth::{apply_tool, generate_workflow, GeneratorConfig};
use proptest::prelude::*;

fn gen_config() -> impl Strategy<Value = GeneratorConfig> {
    (5usize..=12, 0usize..=10, 0.0f64..=1.0).prop_map(|(lo, extra, noise)| GeneratorConfig {
        min_steps: lo,
        max_steps: (lo + extra).min(30),
        noise_level: noise,
        ..GeneratorConfig::default()
    })
}

fn teacher(directives: &[usize]) -> CompressorHandle {
    let mut p = DEFAULT_SEED_PROMPT.to_string();
    for &d in directives {
        p = format!("{p} {}", DIRECTIVES[d]);
    }
    CompressorHandle::teacher("t", &p, Arc::new(MockTeacher::new()), 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generation_is_pure_and_solvable(seed in 0u64..100_000, cfg in gen_config()) {
        let (w, world) = generate_workflow(seed, &cfg).unwrap();
        prop_assert_eq!(&(w.clone(), world.clone()), &generate_workflow(seed, &cfg).unwrap());
        prop_assert!((cfg.min_steps..=cfg.max_steps).contains(&w.plan.len()));
        let full = run_full(&w, &world, &ScriptedAgent::default(), &RunConfig::default()).unwrap();
        prop_assert_eq!(Some(&full.final_answer), w.gold_answer.as_ref());
        // per-step records, positive and nondecreasing context under full mode
        prop_assert_eq!(full.per_step.len(), w.plan.len());
        let sizes = full.context_tokens();
        prop_assert!(sizes.iter().all(|&n| n > 0));
        prop_assert!(sizes.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn tools_are_deterministic(seed in 0u64..100_000) {
        let (w, world) = generate_workflow(seed, &GeneratorConfig::default()).unwrap();
        let full = run_full(&w, &world, &ScriptedAgent::default(), &RunConfig::default()).unwrap();
        for rec in &full.per_step {
            for line in rec.agent_output.lines() {
                if let Ok(call) = line.trim().parse::<paace::synth::ToolCall>() {
                    prop_assert_eq!(apply_tool(&world, &call), apply_tool(&world, &call));
                }
            }
        }
    }

    #[test]
    fn dep_and_peak_follow_stored_sizes(seed in 0u64..100_000, ds in prop::collection::vec(0usize..11, 0..4)) {
        let (w, world) = generate_workflow(seed, &GeneratorConfig::default()).unwrap();
        let t = run_compressed(&w, &world, &ScriptedAgent::default(), &teacher(&ds), &RunConfig::default()).unwrap();
        let sizes = t.context_tokens();
        prop_assert_eq!(dependency_tokens(&t), sizes.iter().map(|&n| n as u64).sum::<u64>());
        prop_assert_eq!(peak(&t).unwrap(), *sizes.iter().max().unwrap());
        for r in &t.compression_records {
            let expect = r.original_tokens > 0
                && r.compressed_tokens < r.original_tokens
                && r.compressed_tokens > 0
                && !r.compressed_text.trim().is_empty();
            prop_assert_eq!(r.valid, expect);
        }
    }

    #[test]
    fn identity_compression_reproduces_full_run(seed in 0u64..100_000) {
        let (w, world) = generate_workflow(seed, &GeneratorConfig::default()).unwrap();
        let agent = ScriptedAgent::default();
        let full = run_full(&w, &world, &agent, &RunConfig::default()).unwrap();
        let same = run_compressed(&w, &world, &agent, &CompressorHandle::identity(2), &RunConfig::default()).unwrap();
        prop_assert_eq!(&full.final_answer, &same.final_answer);
        prop_assert_eq!(dependency_tokens(&full), dependency_tokens(&same));
        prop_assert_eq!(full.context_tokens(), same.context_tokens());
    }

    #[test]
    fn tuples_only_from_successful_clean_runs(seed in 0u64..100_000, ds in prop::collection::vec(0usize..11, 0..4), budget in prop::option::of(50usize..400)) {
        let (w, world) = generate_workflow(seed, &GeneratorConfig::default()).unwrap();
        let agent = ScriptedAgent::default();
        let cfg = RunConfig { token_budget: budget, ..RunConfig::default() };
        let full = run_full(&w, &world, &agent, &RunConfig::default()).unwrap();
        let compressed = run_compressed(&w, &world, &agent, &teacher(&ds), &cfg).unwrap();
        let pair = TrajectoryPair { full, compressed };
        let th = Thresholds::default();
        let label = label_trajectory(&w, &pair, &th, &HashEmbedder::default(), &RuleJudge::strict()).unwrap();
        let tuples = extract_tuples("p", &pair, &label);
        if pair.compressed.truncated || pair.compressed.fallback || !label.success {
            prop_assert!(tuples.is_empty());
        }
        for t in &tuples {
            prop_assert!(t.ratio > 0.0 && t.ratio < 1.0);
            prop_assert!(!t.target.trim().is_empty());
        }
        // re-running the label on the stored pair gives the same verdict
        let again = label_trajectory(&w, &pair, &th, &HashEmbedder::default(), &RuleJudge::strict()).unwrap();
        prop_assert_eq!(again, label);
    }

    #[test]
    fn baselines_keep_system_and_plan(seed in 0u64..100_000, step in 1usize..5, turns in 1usize..4, frac in 0.05f64..0.95) {
        let (w, world) = generate_workflow(seed, &GeneratorConfig::default()).unwrap();
        let t = run_compressed(&w, &world, &ScriptedAgent::default(), &CompressorHandle::identity(2), &RunConfig::default()).unwrap();
        let c = ContextState::parse(&t.compression_records[step - 1].original_text, step);
        let slice = plan_slice(&w.plan, step, 2).unwrap();
        let outs = [
            fifo_compress(&c, turns),
            retrieval_compress(&c, &slice, &HashEmbedder::default(), turns).unwrap(),
            extractive_compress(&c, &slice, frac),
        ];
        for o in outs {
            prop_assert_eq!(&o.system_prompt, &c.system_prompt);
            prop_assert_eq!(&o.plan_text, &c.plan_text);
        }
    }
}

fn verdict(label: JudgeLabel) -> JudgeVerdict {
    JudgeVerdict { label, rationale: String::new() }
}

fn judge_label() -> impl Strategy<Value = JudgeLabel> {
    prop_oneof![Just(JudgeLabel::Better), Just(JudgeLabel::Equal), Just(JudgeLabel::Worse)]
}

proptest! {
    #[test]
    fn record_validity_rule(orig in 0usize..50, kept in 0usize..60, blank in any::<bool>()) {
        let text = if blank { " \n".to_string() } else { "w ".repeat(kept) };
        let r = CompressionRecord::new(1, 2, "s".into(), "p".into(), orig, kept, "o".into(), text.clone());
        let ratio = if orig == 0 { 0.0 } else { kept as f64 / orig as f64 };
        prop_assert_eq!(r.valid, ratio > 0.0 && ratio < 1.0 && !text.trim().is_empty());
    }

    #[test]
    fn success_monotone_in_theta(s in -1.0f64..=1.0, hi in 0.01f64..=1.0, lo_frac in 0.0f64..=1.0,
                                 ratios in prop::collection::vec(0.0f64..1.2, 1..6), j in judge_label()) {
        let lo = (hi * lo_frac).max(1e-9);
        let inputs = LabelInputs { s, ratios: ratios.clone(), non_empty: vec![true; ratios.len()], judge: verdict(j), truncated: false };
        let at_hi = decide(inputs.clone(), &Thresholds { theta: hi, ..Thresholds::default() });
        let at_lo = decide(inputs, &Thresholds { theta: lo, ..Thresholds::default() });
        if at_hi.success {
            prop_assert!(at_lo.success);
        }
        prop_assert_eq!(at_hi.success, at_hi.failure_reasons.is_empty());
    }

    #[test]
    fn worse_always_fails(s in -1.0f64..=1.0, ratios in prop::collection::vec(0.01f64..0.99, 1..6)) {
        let n = ratios.len();
        let l = decide(LabelInputs { s, ratios, non_empty: vec![true; n], judge: verdict(JudgeLabel::Worse), truncated: false }, &Thresholds::default());
        prop_assert!(!l.success);
    }

    #[test]
    fn cosine_bounds_symmetry_scale(a in prop::collection::vec(-10.0f64..10.0, 4), b in prop::collection::vec(-10.0f64..10.0, 4), k in 0.1f64..100.0) {
        let (u, v) = (EmbeddingVector::new(a.clone()), EmbeddingVector::new(b));
        prop_assume!(!u.is_zero() && !v.is_zero());
        let c = cosine(&u, &v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((c - cosine(&v, &u).unwrap()).abs() < 1e-12);
        let scaled = EmbeddingVector::new(a.iter().map(|x| x * k).collect());
        prop_assert!((c - cosine(&scaled, &v).unwrap()).abs() < 1e-9);
        let len = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((u.norm - len).abs() < 1e-12);
    }

    #[test]
    fn stats_stay_consistent(results in prop::collection::vec((any::<bool>(), 0.0f64..=1.0, 0.01f64..0.99), 0..40)) {
        let mut st = VariantStats::default();
        for (i, &(success, s, ratio)) in results.iter().enumerate() {
            st.record(&EvalResult { seed: i as u64, success, s, ratio });
        }
        let n_success = results.iter().filter(|r| r.0).count();
        prop_assert_eq!(st.n_evals, results.len() as u64);
        prop_assert_eq!(st.n_success, n_success as u64);
        prop_assert!(st.n_success <= st.n_evals);
        match st.success_rate() {
            None => prop_assert!(results.is_empty()),
            Some(sr) => prop_assert!((sr - n_success as f64 / results.len() as f64).abs() < 1e-15),
        }
        prop_assert_eq!(st.mean_s().is_some(), n_success > 0);
        if let Some(ms) = st.mean_s() {
            let want = results.iter().filter(|r| r.0).map(|r| r.1).sum::<f64>() / n_success as f64;
            prop_assert!((ms - want).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_or_self_dependencies_rejected(n in 2usize..10, bad in 0usize..10, offset in 0usize..5) {
        let bad = bad % n + 1;
        let steps: Vec<TaskStep> = (1..=n)
            .map(|id| {
                let deps: Vec<usize> = if id == bad { vec![id + offset] } else { (1..id).take(1).collect() };
                TaskStep::new(id, TaskKind::Arithmetic, "sum $1 $1", deps)
            })
            .collect();
        prop_assert!(Plan::new(steps).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn concatenated_datasets_stay_valid(seeds in prop::collection::vec(0u64..10_000, 1..4)) {
        let dir = tempfile::tempdir().unwrap();
        let agent = ScriptedAgent::default();
        let mut all = Vec::new();
        for seed in seeds {
            let (w, world) = generate_workflow(seed, &GeneratorConfig::default()).unwrap();
            let full = run_full(&w, &world, &agent, &RunConfig::default()).unwrap();
            let compressed = run_compressed(&w, &world, &agent, &CompressorHandle::oracle(2), &RunConfig::default()).unwrap();
            let pair = TrajectoryPair { full, compressed };
            let l = label_trajectory(&w, &pair, &Thresholds::default(), &HashEmbedder::default(), &RuleJudge::strict()).unwrap();
            all.push(extract_tuples("r", &pair, &l));
        }
        let mut joined = Vec::new();
        for (i, ts) in all.iter().enumerate() {
            let p = dir.path().join(format!("{i}.jsonl"));
            let m = write_dataset(ts, &p).unwrap();
            prop_assert_eq!(m.count, ts.len());
            joined.extend(std::fs::read(&p).unwrap());
        }
        let jp = dir.path().join("joined.jsonl");
        std::fs::write(&jp, joined).unwrap();
        let back = read_dataset(&jp).unwrap();
        prop_assert_eq!(back, all.concat());
    }
}
