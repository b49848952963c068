//! Acceptance suite: one test per shipped guarantee, each printing its
//! measured numbers. Run with `cargo test --test acceptance -- --nocapture`
//! to see the per-criterion detail lines.

use plantree::env::{self, ActionKind, Difficulty, EnvKind};
use plantree::features::derive_seed;
use plantree::genadapter::mock::{MockBehavior, MockGenServer, MockScript};
use plantree::genadapter::{GenClient, RemoteExpander};
use plantree::mcts::{run_search, run_search_with, PlanTree, SearchConfig};
use plantree::pipeline::{self, ExperimentConfig};
use plantree::policy::{self, PolicyParams};
use plantree::prefdata::{self, PairStrategy, PreferencePair};
use plantree::scalar::neg_log_sigmoid;
use plantree::train::{self, TrainConfig};
use plantree::value::ValueParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

const DIM: usize = 1 << 13;

fn random_params(seed: u64, scale: f64) -> PolicyParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = PolicyParams::zeros(DIM);
    for w in &mut params.weights {
        *w = rng.random_range(-scale..scale);
    }
    params
}

/// Searched trees with enough terminals to mine pairs and trajectories from.
fn searched_trees(n: usize, seed: u64, difficulty: Difficulty) -> Vec<PlanTree<f64>> {
    let problems = env::generate_problems(EnvKind::ArithChain, seed, n, difficulty);
    let policy_params = PolicyParams::<f64>::zeros(DIM);
    let value_params = ValueParams::<f64>::random(DIM, seed, 0.1);
    problems
        .iter()
        .map(|p| {
            let config = SearchConfig {
                n_simulations: 72,
                rng_seed: derive_seed(seed, &p.id.0),
                ..SearchConfig::default()
            };
            run_search(p, &policy_params, &value_params, &config).unwrap()
        })
        .collect()
}

fn mined_pairs(seed: u64) -> Vec<PreferencePair<f64>> {
    let trees = searched_trees(16, seed, Difficulty::Medium);
    prefdata::extract_pairs_all(&trees, PairStrategy::AllPlansAllSolutions, seed)
}

/// Central finite differences over the gradient's support plus a few
/// untouched coordinates.
fn fd_matches(
    grad: &plantree::features::FeatureVector<f64>,
    theta: &mut PolicyParams<f64>,
    mut eval: impl FnMut(&PolicyParams<f64>) -> f64,
    max_coords: usize,
) -> (usize, f64) {
    let eps = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for &(idx, g) in grad.entries().iter().take(max_coords) {
        let original = theta.weights[idx as usize];
        theta.weights[idx as usize] = original + eps;
        let plus = eval(theta);
        theta.weights[idx as usize] = original - eps;
        let minus = eval(theta);
        theta.weights[idx as usize] = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = g.abs().max(numeric.abs());
        let err = if denom > 1e-6 {
            ((g - numeric) / denom).abs()
        } else {
            // derivative is (numerically) zero; require agreement in
            // absolute terms instead of an ill-defined relative error
            (g - numeric).abs() * 1e4
        };
        worst = worst.max(err);
        checked += 1;
        assert!(
            err < 1e-4,
            "finite-difference mismatch at idx {idx}: analytic {g}, numeric {numeric}"
        );
    }
    (checked, worst)
}

#[test]
fn criterion_1_gradient_oracles() {
    let started = Instant::now();
    let pairs = mined_pairs(41);
    assert!(pairs.len() >= 100, "need 100 pair instances, got {}", pairs.len());
    let trees = searched_trees(48, 42, Difficulty::Medium);
    let trajs = prefdata::extract_sft(&trees, 4, 42);
    let traj_pairs = prefdata::extract_trajectory_pairs(&trees, 6, 42);
    assert!(traj_pairs.len() >= 100, "need 100 trajectory pairs, got {}", traj_pairs.len());
    let steps: Vec<_> = trajs.iter().flat_map(|t| t.steps.iter()).collect();
    assert!(steps.len() >= 100);

    let cfg = TrainConfig::<f64>::default();
    let mut worst: f64 = 0.0;

    // Step-APO and Step-DPO on 100 pairs each
    for (i, pair) in pairs.iter().take(100).enumerate() {
        let reference = random_params(9000 + i as u64, 0.2).snapshot();
        let mut theta = random_params(1000 + i as u64, 0.3);
        let grad = train::step_apo_grad(pair, &theta, &reference, &cfg).unwrap();
        let (_, w) = fd_matches(
            &grad,
            &mut theta,
            |t| train::step_apo_loss(pair, t, &reference, &cfg).unwrap(),
            8,
        );
        worst = worst.max(w);

        let grad = train::step_dpo_grad(pair, &theta, &reference, cfg.beta).unwrap();
        let (_, w) = fd_matches(
            &grad,
            &mut theta,
            |t| train::step_dpo_loss(pair, t, &reference, cfg.beta).unwrap(),
            8,
        );
        worst = worst.max(w);
    }

    // instance DPO on 100 trajectory pairs
    for (i, pair) in traj_pairs.iter().take(100).enumerate() {
        let reference = random_params(9500 + i as u64, 0.2).snapshot();
        let mut theta = random_params(2000 + i as u64, 0.3);
        let grad = train::dpo_grad(pair, &theta, &reference, cfg.beta).unwrap();
        let (_, w) = fd_matches(
            &grad,
            &mut theta,
            |t| train::dpo_loss(pair, t, &reference, cfg.beta).unwrap(),
            6,
        );
        worst = worst.max(w);
    }

    // SFT negative log-likelihood on 100 trajectory steps
    for (i, step) in steps.iter().take(100).enumerate() {
        let mut theta = random_params(3000 + i as u64, 0.3);
        let tokens = policy::state_tokens_from_key(&step.state_key);
        let feats: Vec<_> = step
            .candidates
            .iter()
            .map(|d| {
                policy::featurize_action::<f64>(
                    &tokens,
                    &env::StepAction::from_display(d),
                    DIM,
                )
            })
            .collect();
        let mut grad =
            policy::grad_log_prob_from_features(&theta, &feats, step.chosen_idx).unwrap();
        grad.scale(-1.0);
        let (_, w) = fd_matches(
            &grad,
            &mut theta,
            |t| -policy::log_probs_from_features(t, &feats).unwrap()[step.chosen_idx],
            8,
        );
        worst = worst.max(w);
    }

    let elapsed = started.elapsed();
    println!(
        "criterion 1 PASS: step-apo/step-dpo/dpo/sft-nll gradients match central FD \
         (100 instances each, worst relative error {worst:.2e}, {elapsed:.2?})"
    );
    assert!(elapsed.as_secs() < 30, "runtime budget exceeded: {elapsed:?}");
}

#[test]
fn criterion_2_reduction_identity() {
    let mut pairs = Vec::new();
    let mut seed = 60u64;
    while pairs.len() < 1000 {
        pairs.extend(mined_pairs(seed));
        seed += 1;
    }
    pairs.truncate(1000);
    let cfg = TrainConfig::<f64>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for (i, pair) in pairs.iter_mut().enumerate() {
        // equalize the child values; kind and scaling stay arbitrary
        let v = rng.random_range(-0.9..0.9);
        pair.v_chosen = v;
        pair.v_rejected = v;
        let theta = random_params(500 + i as u64 % 17, 0.3);
        let reference = random_params(800 + i as u64 % 13, 0.2).snapshot();
        let apo = train::step_apo_loss(pair, &theta, &reference, &cfg).unwrap();
        let dpo = train::step_dpo_loss(pair, &theta, &reference, cfg.beta).unwrap();
        worst = worst.max((apo - dpo).abs());
    }
    println!(
        "criterion 2 PASS: |step_apo - step_dpo| <= {worst:.2e} over 1000 equal-value pairs"
    );
    assert!(worst < 1e-12);
}

#[test]
fn criterion_3_closed_form_spot_values() {
    let pairs = mined_pairs(43);
    let cfg = TrainConfig::<f64>::default();

    // theta == ref with equal values -> ln 2
    let theta = random_params(3, 0.3);
    let reference = theta.snapshot();
    let mut equal = pairs[0].clone();
    equal.v_rejected = equal.v_chosen;
    let loss = train::step_apo_loss(&equal, &theta, &reference, &cfg).unwrap();
    let ln2_err = (loss - std::f64::consts::LN_2).abs();
    assert!(ln2_err < 1e-12, "ln2 case off by {ln2_err:.2e}");

    // solution pair: value gap 2 scaled by 0.3 at theta == ref
    let solution = pairs
        .iter()
        .find(|p| p.kind == ActionKind::Solution)
        .expect("mined pairs include a solution pair");
    assert_eq!(solution.v_chosen, 1.0);
    assert_eq!(solution.v_rejected, -1.0);
    let loss = train::step_apo_loss(solution, &theta, &reference, &cfg).unwrap();
    let expected = neg_log_sigmoid(-0.6);
    let sol_err = (loss - expected).abs();
    assert!(sol_err < 1e-9, "solution case off by {sol_err:.2e}");
    assert!((expected - 1.0374879504858856).abs() < 1e-9);

    println!(
        "criterion 3 PASS: ln2 case error {ln2_err:.1e}, solution-pair case \
         -log sigma(-0.6) = {expected:.6} error {sol_err:.1e}"
    );
}

/// Brute-force PUCT argmax, re-derived from the formula.
fn brute_force_select(tree: &PlanTree<f64>, node: usize, c_puct: f64, priors: &[f64]) -> usize {
    let parent = &tree.nodes[node];
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, &child_idx) in parent.children.iter().enumerate() {
        let child = &tree.nodes[child_idx];
        let q = if child.n > 0 { child.q_edge } else { 0.0 };
        let score = q + c_puct * priors[i] * (parent.n as f64).sqrt() / (1.0 + child.n as f64);
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    best
}

fn check_tree_invariants(tree: &PlanTree<f64>) {
    for (idx, node) in tree.nodes.iter().enumerate() {
        assert!(
            node.v >= -1.0 - 1e-12 && node.v <= 1.0 + 1e-12,
            "V out of range: {}",
            node.v
        );
        assert!(
            node.q_edge >= -1.0 - 1e-12 && node.q_edge <= 1.0 + 1e-12,
            "Q out of range: {}",
            node.q_edge
        );
        if !node.expanded {
            continue;
        }
        let visited: Vec<_> = node
            .children
            .iter()
            .map(|&c| &tree.nodes[c])
            .filter(|c| c.n > 0)
            .collect();
        if !visited.is_empty() {
            let num: f64 = visited.iter().map(|c| c.n as f64 * c.q_edge).sum();
            let den: f64 = visited.iter().map(|c| c.n as f64).sum();
            assert!(
                (node.v - num / den).abs() < 1e-9,
                "backup identity broken at node {idx}: V {} vs weighted mean {}",
                node.v,
                num / den
            );
        }
        if !node.children.is_empty() {
            let priors: Vec<f64> = node.children.iter().map(|&c| tree.nodes[c].prior).collect();
            let chosen = tree.select_child(idx, tree.config.c_puct, &priors).unwrap();
            let brute = brute_force_select(tree, idx, tree.config.c_puct, &priors);
            assert_eq!(chosen, brute, "PUCT argmax mismatch at node {idx}");
        }
    }
}

#[test]
fn criterion_4_mcts_invariant_suite() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let difficulties = [
        Difficulty::Easy,
        Difficulty::Medium,
        Difficulty::Hard,
        Difficulty::Mixed,
    ];
    let mut searches = 0usize;
    while searches < 1000 {
        let difficulty = difficulties[rng.random_range(0..difficulties.len())];
        let problem =
            &env::generate_problems(EnvKind::ArithChain, rng.random(), 1, difficulty)[0];
        let policy_params = random_params(rng.random(), rng.random_range(0.0..0.4));
        let value_params = ValueParams::<f64>::random(DIM, rng.random(), 0.15);
        let config = SearchConfig {
            c_puct: rng.random_range(0.5..3.0),
            n_simulations: rng.random_range(8..40),
            root_children: rng.random_range(2..6),
            inner_children: rng.random_range(2..4),
            max_depth: rng.random_range(4..7),
            temperature: rng.random_range(0.3..1.5),
            rng_seed: rng.random(),
        };
        let tree = run_search(problem, &policy_params, &value_params, &config).unwrap();
        check_tree_invariants(&tree);
        let again = run_search(problem, &policy_params, &value_params, &config).unwrap();
        assert_eq!(tree.dump_json(), again.dump_json(), "seeded rerun differs");
        searches += 1;
    }
    let elapsed = started.elapsed();
    println!(
        "criterion 4 PASS: {searches} randomized searches keep the backup identity, \
         bounds, brute-force PUCT argmax, and byte-identical reruns ({elapsed:.2?})"
    );
    assert!(elapsed.as_secs() < 120, "runtime budget exceeded: {elapsed:?}");
}

/// Independent brute-force pair enumerator over a tree's sibling groups.
fn brute_force_pairs(
    tree: &PlanTree<f64>,
    strategy: PairStrategy,
) -> Vec<(String, f64, f64, ActionKind)> {
    let all_plans = matches!(
        strategy,
        PairStrategy::AllPlansOneSolution | PairStrategy::AllPlansAllSolutions
    );
    let all_solutions = matches!(
        strategy,
        PairStrategy::AllPlansAllSolutions | PairStrategy::OnePlanAllSolutions
    );
    let mut expected = Vec::new();
    for node in &tree.nodes {
        if node.children.len() < 2 {
            continue;
        }
        let key = node.state.canonical_key();
        let kids: Vec<_> = node
            .children
            .iter()
            .map(|&c| &tree.nodes[c])
            .filter(|c| c.n >= 1)
            .collect();
        let plan_pos: Vec<_> = kids
            .iter()
            .filter(|c| {
                c.incoming_action.as_ref().unwrap().kind() == ActionKind::Plan && c.v > 0.0
            })
            .collect();
        let plan_neg: Vec<_> = kids
            .iter()
            .filter(|c| {
                c.incoming_action.as_ref().unwrap().kind() == ActionKind::Plan && c.v < 0.0
            })
            .collect();
        if !plan_pos.is_empty() && !plan_neg.is_empty() {
            if all_plans {
                for p in &plan_pos {
                    for n in &plan_neg {
                        expected.push((key.clone(), p.v, n.v, ActionKind::Plan));
                    }
                }
            } else {
                let best = plan_pos
                    .iter()
                    .map(|c| c.v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let worst = plan_neg.iter().map(|c| c.v).fold(f64::INFINITY, f64::min);
                expected.push((key.clone(), best, worst, ActionKind::Plan));
            }
        }
        let sol_correct = kids
            .iter()
            .filter(|c| c.terminal_verdict.map(|v| v.correct) == Some(true))
            .count();
        let sol_wrong = kids
            .iter()
            .filter(|c| c.terminal_verdict.map(|v| v.correct) == Some(false))
            .count();
        if sol_correct > 0 && sol_wrong > 0 {
            let count = if all_solutions {
                sol_correct * sol_wrong
            } else {
                1
            };
            for _ in 0..count {
                expected.push((key.clone(), 1.0, -1.0, ActionKind::Solution));
            }
        }
    }
    expected
}

#[test]
fn criterion_5_pair_extraction_against_brute_force() {
    // searched trees with hand-rewritten sibling values covering positives,
    // negatives, exact zeros, and unvisited children
    let mut trees = searched_trees(10, 77, Difficulty::Medium);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for tree in &mut trees {
        for idx in 0..tree.nodes.len() {
            if tree.nodes[idx].children.len() < 2 {
                continue;
            }
            for &child in tree.nodes[idx].children.clone().iter() {
                let node = &mut tree.nodes[child];
                if node.terminal_verdict.is_some() {
                    continue; // keep terminal children verdict-consistent
                }
                match rng.random_range(0..5u8) {
                    0 => {
                        node.n = 0; // unvisited: must never pair
                        node.v = rng.random_range(-1.0..1.0);
                    }
                    1 => {
                        node.n = rng.random_range(1..4);
                        node.v = 0.0; // exact zero: unclassified
                    }
                    _ => {
                        node.n = rng.random_range(1..4);
                        node.v = rng.random_range(-0.99..0.99);
                    }
                }
            }
        }
    }

    for strategy in PairStrategy::ALL {
        let pairs = prefdata::extract_pairs_all(&trees, strategy, 9);
        let mut got: Vec<(String, f64, f64, ActionKind)> = pairs
            .iter()
            .map(|p| (p.state_key.clone(), p.v_chosen, p.v_rejected, p.kind))
            .collect();
        let mut expected: Vec<(String, f64, f64, ActionKind)> = Vec::new();
        for tree in &trees {
            expected.extend(brute_force_pairs(tree, strategy));
        }
        // solution pairs are value-degenerate (+1/-1), so compare plan pairs
        // exactly and solution pairs by per-parent counts
        let sort_key = |t: &(String, f64, f64, ActionKind)| {
            (
                t.0.clone(),
                format!("{:?}", t.3),
                (t.1 * 1e9) as i64,
                (t.2 * 1e9) as i64,
            )
        };
        got.sort_by_key(sort_key);
        expected.sort_by_key(sort_key);
        assert_eq!(got, expected, "strategy {strategy:?}");

        for pair in &pairs {
            assert!(pair.v_chosen > 0.0 && pair.v_rejected < 0.0);
        }
        if matches!(
            strategy,
            PairStrategy::AllPlansOneSolution | PairStrategy::OnePlanOneSolution
        ) {
            let mut per_parent = std::collections::BTreeMap::new();
            for p in pairs.iter().filter(|p| p.kind == ActionKind::Solution) {
                *per_parent.entry(p.state_key.clone()).or_insert(0usize) += 1;
            }
            assert!(per_parent.values().all(|&c| c <= 1));
        }
    }
    println!(
        "criterion 5 PASS: all four strategies match the brute-force enumerator \
         (positive x negative products, one-solution caps, zeros and unvisited excluded)"
    );
}

struct TrendResults {
    reports: Vec<pipeline::ExperimentReport>,
    elapsed: std::time::Duration,
}

fn trend_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    }
}

fn trend_results() -> &'static TrendResults {
    static TREND: OnceLock<TrendResults> = OnceLock::new();
    TREND.get_or_init(|| {
        let started = Instant::now();
        let reports: Vec<pipeline::ExperimentReport> = (0..10)
            .map(|seed| pipeline::run_experiment(&trend_config(seed), None).unwrap())
            .collect();
        TrendResults {
            reports,
            elapsed: started.elapsed(),
        }
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_6_end_to_end_trend() {
    let trend = trend_results();
    let r1_sft = mean(trend.reports.iter().map(|r| r.rounds[0].accuracy.sft));
    let r1_apo = mean(trend.reports.iter().map(|r| r.rounds[0].accuracy.step_apo));
    let r1_dpo = mean(
        trend
            .reports
            .iter()
            .map(|r| r.rounds[0].accuracy.step_dpo.unwrap()),
    );
    let r2_apo = mean(trend.reports.iter().map(|r| r.rounds[1].accuracy.step_apo));
    let base = mean(trend.reports.iter().map(|r| r.rounds[0].accuracy.base));

    println!(
        "criterion 6: base {base:.3}, r1 sft {r1_sft:.3}, r1 step-apo {r1_apo:.3}, \
         r1 step-dpo {r1_dpo:.3}, r2 step-apo {r2_apo:.3} ({:.1?} for 10 seeds)",
        trend.elapsed
    );
    assert!(
        r1_apo >= r1_sft + 0.05,
        "(a) round-1 step-apo {r1_apo:.3} must exceed round-1 sft {r1_sft:.3} by >= 5 points"
    );
    assert!(
        r1_apo >= r1_dpo,
        "(b) round-1 step-apo {r1_apo:.3} must be >= round-1 step-dpo {r1_dpo:.3}"
    );
    assert!(
        r2_apo >= r1_apo,
        "(c) round-2 step-apo {r2_apo:.3} must be >= round-1 step-apo {r1_apo:.3}"
    );
    assert!(
        trend.elapsed.as_secs() < 900,
        "runtime budget exceeded: {:?}",
        trend.elapsed
    );
    println!("criterion 6 PASS: (a) +{:.3} (b) +{:.3} (c) +{:.3}", r1_apo - r1_sft, r1_apo - r1_dpo, r2_apo - r1_apo);
}

#[test]
fn criterion_7_data_construction_ablation() {
    // round-1 generation shared per seed; strategies differ only in pair
    // extraction and the preference-training stage
    let mut per_strategy: std::collections::BTreeMap<&str, Vec<f64>> =
        std::collections::BTreeMap::new();
    for seed in 0..10u64 {
        let cfg = ExperimentConfig {
            seed,
            rounds: 1,
            ablations: false,
            ..ExperimentConfig::default()
        };
        let env_kind = cfg.env_kind().unwrap();
        let difficulty = cfg.difficulty_level().unwrap();
        let all =
            env::generate_problems(env_kind, cfg.seed, cfg.n_train + cfg.n_heldout, difficulty);
        let (pool, heldout) = all.split_at(cfg.n_train);
        let subset = pipeline::round_subset(pool, cfg.round1_subset_frac, cfg.seed);
        let base = PolicyParams::<f64>::zeros(cfg.feature_dim);
        let gen_value = ValueParams::random(
            cfg.feature_dim,
            derive_seed(cfg.seed, "value-init"),
            cfg.value_init_scale,
        );
        let round_seed = derive_seed(cfg.seed, "round-1");
        let trees =
            pipeline::generate_trees(&subset, &base, &gen_value, &cfg.search_round1, round_seed)
                .unwrap();
        let sft_data = prefdata::extract_sft(&trees, cfg.sft_max_per_problem, round_seed);
        let mut sft_cfg = cfg.sft.clone();
        sft_cfg.seed = derive_seed(round_seed, "sft");
        let (sft_policy, _) = train::sft_fit(&base, &sft_data, &sft_cfg).unwrap();
        let reference = sft_policy.snapshot();

        for strategy in PairStrategy::ALL {
            let pairs = prefdata::extract_pairs_all(&trees, strategy, round_seed);
            let mut apo_cfg = cfg.apo.clone();
            apo_cfg.seed = derive_seed(round_seed, "apo");
            let policy = if pairs.is_empty() {
                sft_policy.clone()
            } else {
                train::apo_fit(&sft_policy, &reference, &pairs, &apo_cfg)
                    .unwrap()
                    .0
            };
            let acc =
                pipeline::evaluate_policy(&policy, heldout, cfg.search_round1.max_depth);
            per_strategy.entry(strategy.name()).or_default().push(acc);
        }
    }

    println!("criterion 7: data-construction ablation (mean over 10 seeds)");
    println!("{:<28} {:>10}", "strategy", "accuracy");
    for (name, accs) in &per_strategy {
        println!(
            "{:<28} {:>10.3}",
            name,
            accs.iter().sum::<f64>() / accs.len() as f64
        );
    }
    let all_plans_one = mean(per_strategy["all-plans-one-solution"].iter().copied());
    let one_plan_one = mean(per_strategy["one-plan-one-solution"].iter().copied());
    assert!(
        all_plans_one >= one_plan_one,
        "all-plans-one-solution {all_plans_one:.3} must be >= one-plan-one-solution {one_plan_one:.3}"
    );
    println!(
        "criterion 7 PASS: all-plans-one-solution {all_plans_one:.3} >= one-plan-one-solution {one_plan_one:.3}"
    );
}

#[test]
fn criterion_8_dataset_statistics_report() {
    let trend = trend_results();
    // table shape from real generated data
    let first = &trend.reports[0];
    let rows: Vec<(usize, prefdata::DatasetStats)> = first
        .rounds
        .iter()
        .map(|r| (r.round, r.stats.clone()))
        .collect();
    let table = prefdata::render_stats_table(&rows);
    let header = table.lines().next().unwrap();
    for column in ["round", "avg_depth", "pos:neg", "plan_pairs", "solution_pairs"] {
        assert!(header.contains(column), "missing column {column}");
    }
    assert!(table.lines().nth(1).unwrap().contains("1:"));

    // round 2 produces proportionally more positives than round 1
    let r1_pos_frac = mean(trend.reports.iter().map(|r| {
        let s = &r.rounds[0].stats;
        s.pos_terminals as f64 / (s.pos_terminals + s.neg_terminals).max(1) as f64
    }));
    let r2_pos_frac = mean(trend.reports.iter().map(|r| {
        let s = &r.rounds[1].stats;
        s.pos_terminals as f64 / (s.pos_terminals + s.neg_terminals).max(1) as f64
    }));
    println!("criterion 8: stats table\n{table}");
    println!(
        "criterion 8: mean positive fraction round1 {r1_pos_frac:.3} -> round2 {r2_pos_frac:.3}"
    );
    assert!(
        r2_pos_frac > r1_pos_frac,
        "round-2 positive fraction {r2_pos_frac:.3} must exceed round-1 {r1_pos_frac:.3}"
    );
    println!("criterion 8 PASS");
}

#[test]
fn criterion_9_adapter_protocol_conformance() {
    let server = MockGenServer::spawn(MockBehavior {
        script: MockScript::Scripted,
        ..MockBehavior::default()
    });
    let client = GenClient::new(server.url()).with_timeout(std::time::Duration::from_secs(5));
    let expander = RemoteExpander::new(&client);
    let problems = env::generate_problems(EnvKind::ArithChain, 31, 8, Difficulty::Mixed);
    let value_params = ValueParams::<f64>::random(DIM, 31, 0.1);
    let mut checked = 0usize;
    for (i, problem) in problems.iter().enumerate() {
        let config = SearchConfig {
            n_simulations: 24,
            rng_seed: 1000 + i as u64,
            ..SearchConfig::default()
        };
        let tree = run_search_with(problem, &expander, &value_params, &config).unwrap();
        check_tree_invariants(&tree);
        let again = run_search_with(problem, &expander, &value_params, &config).unwrap();
        assert_eq!(
            tree.dump_json(),
            again.dump_json(),
            "adapter-driven search must be reproducible"
        );
        checked += 1;
    }
    println!(
        "criterion 9 PASS: {checked} adapter-driven searches against the bundled mock are \
         reproducible and satisfy the full tree-invariant suite"
    );
}
