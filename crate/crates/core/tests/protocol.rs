//! End-to-end protocol properties of the federated simulator.

use lbgm_core::data::Dataset;
use lbgm_core::data::PartitionMode;
use lbgm_core::fl::run_vanilla;
use lbgm_core::harness::{run_experiment, Algorithm, ExperimentConfig, Simulation};
use lbgm_core::lbgm::{run_lbgm, run_lbgm_sampled, MessageKind};
use lbgm_core::models::{Labels, ModelKind};

fn small(alg: Algorithm) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(alg);
    c.data.n_train = 400;
    c.data.n_test = 100;
    c.hidden = 16;
    c.workers = 4;
    c.rounds = 12;
    c
}

#[test]
fn zero_rounds_gives_only_initial_row() {
    let mut c = small(Algorithm::Vanilla);
    c.rounds = 0;
    let out = run_vanilla(&c).unwrap();
    assert_eq!(out.metrics.rows.len(), 1);
    assert_eq!(out.metrics.rows[0].round, 0);
    assert_eq!(out.metrics.rows[0].cum_floats, 0.0);
    assert!(out.ledger.rows().is_empty());
}

#[test]
fn replay_is_bit_identical() {
    for alg in [
        Algorithm::Lbgm,
        Algorithm::TopKLbgm,
        Algorithm::LbgmSampled,
        Algorithm::SignLbgm,
    ] {
        let c = small(alg);
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(
            a.metrics.to_csv_bytes().unwrap(),
            b.metrics.to_csv_bytes().unwrap(),
            "{alg}"
        );
        assert!(a.final_theta.bit_eq(&b.final_theta));
        let mut other = c.clone();
        other.seed = 1;
        assert_ne!(run_experiment(&other).unwrap().metrics, a.metrics, "{alg}");
    }
}

#[test]
fn lbg_copies_stay_coherent() {
    for alg in [
        Algorithm::Lbgm,
        Algorithm::LbgmSampled,
        Algorithm::RankRLbgm,
        Algorithm::TopKLbgm,
    ] {
        let mut c = small(alg);
        c.delta = 0.5;
        let mut sim = Simulation::new(&c).unwrap();
        for _ in 0..c.rounds {
            sim.step().unwrap();
            for w in sim.workers() {
                match (&w.lbg, sim.server().lbg_copies.get(&w.worker_id)) {
                    (Some(a), Some(b)) => assert!(a.bit_eq(b), "{alg} worker {}", w.worker_id),
                    (None, None) => {}
                    _ => panic!(
                        "{alg}: copies disagree on presence for worker {}",
                        w.worker_id
                    ),
                }
            }
        }
    }
}

#[test]
fn lbgm_ledger_never_exceeds_vanilla() {
    let mut c = small(Algorithm::Vanilla);
    c.partition = PartitionMode::LabelShard(3);
    let v = run_vanilla(&c).unwrap();
    let l = run_lbgm(&c).unwrap();
    for (a, b) in l.metrics.rows.iter().zip(&v.metrics.rows) {
        assert!(a.cum_floats <= b.cum_floats);
    }
    let all_full = l
        .ledger
        .rows()
        .iter()
        .all(|r| r.kind == MessageKind::FullGradient);
    assert_eq!(all_full, l.ledger.total_floats() == v.ledger.total_floats());
}

#[test]
fn compressor_with_zero_delta_matches_compressor_alone() {
    for (base, stacked) in [
        (Algorithm::TopK, Algorithm::TopKLbgm),
        (Algorithm::RankR, Algorithm::RankRLbgm),
        (Algorithm::Sign, Algorithm::SignLbgm),
    ] {
        let mut c = small(base);
        c.delta = 0.0;
        let a = run_experiment(&c).unwrap();
        c.algorithm = stacked;
        let b = run_experiment(&c).unwrap();
        assert_eq!(
            a.ledger.total_floats(),
            b.ledger.total_floats(),
            "{stacked}"
        );
        assert_eq!(a.ledger.total_bits(), b.ledger.total_bits(), "{stacked}");
        assert!(a.final_theta.bit_eq(&b.final_theta), "{stacked}");
    }
}

#[test]
fn sign_stacking_never_costs_more_bits() {
    let mut c = small(Algorithm::Sign);
    c.partition = PartitionMode::LabelShard(3);
    let a = run_experiment(&c).unwrap();
    c.algorithm = Algorithm::SignLbgm;
    c.delta = 0.6;
    let b = run_experiment(&c).unwrap();
    for (x, y) in b.metrics.rows.iter().zip(&a.metrics.rows) {
        assert!(x.cum_bits <= y.cum_bits);
    }
}

#[test]
fn majority_sign_rule_runs() {
    let mut c = small(Algorithm::Sign);
    c.sign_rule = lbgm_core::compress::SignRule::Majority;
    let out = run_experiment(&c).unwrap();
    assert!(out.final_theta.is_finite());
    assert_eq!(out.metrics.rows.len(), c.rounds + 1);
}

#[test]
fn sampling_picks_exact_count_and_first_sends_are_full() {
    let mut c = small(Algorithm::Lbgm);
    c.workers = 10;
    c.data.n_train = 1000;
    c.rounds = 20;
    let out = run_lbgm_sampled(&c, 0.5).unwrap();
    for t in 1..=c.rounds {
        assert_eq!(out.ledger.rows().iter().filter(|r| r.round == t).count(), 5);
    }
    let mut seen = [false; 10];
    for r in out.ledger.rows() {
        if !seen[r.worker] {
            assert_eq!(r.kind, MessageKind::FullGradient);
            seen[r.worker] = true;
        }
    }
}

#[test]
fn collinear_gradients_need_one_full_send() {
    // All inputs are zero, so only the bias receives gradient and every
    // accumulated gradient lies on the same axis.
    let n = 8;
    let targets: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let ds = Dataset::new(
        vec![0.0; n * 3],
        3,
        Labels::Values {
            data: targets,
            dim: 1,
        },
        0,
    )
    .unwrap();
    let mut c = ExperimentConfig::new(Algorithm::Lbgm);
    c.model_kind = ModelKind::LinearRegression;
    c.workers = 1;
    c.rounds = 25;
    c.tau = Some(1);
    c.batch_size = n;
    c.delta = 0.0;
    let (train, test) = ds.split_at(6).unwrap();
    let sim = Simulation::with_data(&c, train, test).unwrap();
    let out = sim.run().unwrap();
    let full = out
        .ledger
        .rows()
        .iter()
        .filter(|r| r.kind == MessageKind::FullGradient)
        .count();
    assert_eq!(full, 1);
    assert_eq!(out.ledger.total_floats(), 4.0 + 24.0);
}

#[test]
fn delta_sq_proxy_is_logged_only_when_monitored() {
    let mut c = small(Algorithm::Lbgm);
    let out = run_lbgm(&c).unwrap();
    assert!(out.metrics.rows.iter().all(|r| r.delta_sq_proxy.is_none()));
    c.monitor_delta_sq = true;
    let out = run_lbgm(&c).unwrap();
    assert!(out.metrics.rows[0].delta_sq_proxy.is_none());
    assert!(
        out.metrics.rows[1].delta_sq_proxy.is_none(),
        "no LBG exists in round 1"
    );
    assert!(out.metrics.rows[2..]
        .iter()
        .all(|r| r.delta_sq_proxy.is_some_and(|d| d >= 0.0)));
}

#[test]
fn separable_data_is_learned() {
    let mut c = ExperimentConfig::new(Algorithm::Vanilla);
    c.data.separation = 10.0;
    c.rounds = 100;
    let out = run_vanilla(&c).unwrap();
    let (train, _) = lbgm_core::harness::load_data(&c).unwrap();
    let model = lbgm_core::harness::build_model(&c, &train);
    let acc = model
        .evaluate(&out.final_theta, &train)
        .unwrap()
        .accuracy
        .unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}
