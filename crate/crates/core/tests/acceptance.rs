//! Acceptance checks. Each test prints one `PASS`/`FAIL` line for its criterion.

mod common;

use std::io::Write;
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use common::*;
use reid_embed::data::{synthesize, EmbeddingSet, Split, SynthSpec};
use reid_embed::eval::{
    average_precision, evaluate, query_candidates, repeated_gallery_draw, ProtocolKind, ProtocolSpec,
};
use reid_embed::geometry::{Matrix, MetricKind};
use reid_embed::losses::{
    batch_loss, compute_weights, BaMode, BatchLossConfig, LossKind, MarginSpec, SamplingScheme, SamplingVariant,
    TRIPLET_HARD_MARGIN,
};
use reid_embed::network::ModelParams;
use reid_embed::optim::{AdamConfig, AdamState};
use reid_embed::sampler::build_epoch;
use reid_embed::train::{embed, train, TrainConfig};

/// Prints the criterion's verdict on stderr, bypassing output capture.
fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n} [{name}]: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let (p, k, d, f) = (4, 3, 10, 8);
    let labels = pk_labels(p, k);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut failures = Vec::new();
    for loss_kind in [LossKind::Triplet, LossKind::Contrastive] {
        for variant in SamplingVariant::ALL {
            for margin_name in ["hard", "softplus"] {
                for normalize in [false, true] {
                    let margin = match (margin_name, loss_kind) {
                        ("softplus", _) => MarginSpec::Softplus,
                        (_, LossKind::Triplet) => MarginSpec::Hard(TRIPLET_HARD_MARGIN),
                        (_, LossKind::Contrastive) => MarginSpec::Hard(1.0),
                    };
                    let cfg = BatchLossConfig {
                        loss_kind,
                        scheme: SamplingScheme::new(variant),
                        margin,
                        metric: MetricKind::Euclidean,
                    };
                    for instance in 0..5u64 {
                        let seed = 1000 * cases as u64 + instance;
                        let mut r = rng(seed);
                        let params = ModelParams::init(&[d, 12, f], normalize, seed).unwrap();
                        let inputs = random_matrix(&mut r, p * k, d, 1.0);
                        let (err, norm) = gradient_check(&params, &inputs, &labels, &cfg, seed, 1e-5);
                        worst = worst.max(err);
                        if err.is_nan() || err > 1e-6 || norm == 0.0 {
                            failures.push(format!(
                                "{}/{}/{margin_name}/norm={normalize}#{instance}: err {err:.2e}, |g| {norm:.2e}",
                                loss_kind.name(),
                                variant.name()
                            ));
                        }
                    }
                    cases += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 120.0;
    verdict(1, "gradient correctness", pass, &format!("{cases} configurations x 5, worst rel. error {worst:.2e}, {secs:.1}s"));
    assert!(pass, "{failures:#?}");
}

#[test]
fn criterion_2_weight_scheme_oracles() {
    let mut r = rng(2);
    let mut bh_ok = true;
    let mut bw_err: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(4..20);
        let mut labels: Vec<u32> = (0..n).map(|_| r.random_range(0..4)).collect();
        labels[0] = 9;
        labels[1] = 9;
        let row: Vec<f64> = (0..n).map(|_| r.random_range(0.0..5.0)).collect();
        let anchor = 0;

        let bh = compute_weights(SamplingScheme::new(SamplingVariant::BatchHard), anchor, &row, &labels, None).unwrap();
        let hardest_pos = (1..n).filter(|&j| labels[j] == 9).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let hardest_neg = (0..n).filter(|&j| labels[j] != 9).min_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        for (idx, w) in bh.positives.iter().zip(&bh.w_p) {
            bh_ok &= *w == if *idx == hardest_pos { 1.0 } else { 0.0 };
        }
        for (idx, w) in bh.negatives.iter().zip(&bh.w_n) {
            bh_ok &= *w == if *idx == hardest_neg { 1.0 } else { 0.0 };
        }

        let bw = compute_weights(SamplingScheme::new(SamplingVariant::BatchWeighted), anchor, &row, &labels, None).unwrap();
        let pos_logits: Vec<f64> = bw.positives.iter().map(|&j| row[j]).collect();
        let neg_logits: Vec<f64> = bw.negatives.iter().map(|&j| -row[j]).collect();
        for (w, o) in [(&bw.w_p, softmax_oracle(&pos_logits)), (&bw.w_n, softmax_oracle(&neg_logits))] {
            bw_err = bw_err.max((w.iter().sum::<f64>() - 1.0).abs());
            for (a, b) in w.iter().zip(&o) {
                bw_err = bw_err.max((a - b).abs());
            }
        }
    }

    let mut ba_err: f64 = 0.0;
    for trial in 0..200u64 {
        let mut r = rng(20_000 + trial);
        let (p, k) = [(2, 2), (2, 3), (3, 2), (3, 3), (4, 3), (2, 6), (6, 2)][trial as usize % 7];
        let labels = pk_labels(p, k);
        let emb = random_matrix(&mut r, p * k, 5, 1.0);
        for margin in [MarginSpec::Softplus, MarginSpec::Hard(0.2), MarginSpec::Hard(1.5)] {
            let cfg = BatchLossConfig {
                loss_kind: LossKind::Triplet,
                scheme: SamplingScheme { variant: SamplingVariant::BatchAll, ba_mode: BaMode::PerTriplet },
                margin,
                metric: MetricKind::Euclidean,
            };
            let got = batch_loss(&emb, &labels, &cfg, None).unwrap().loss;
            let mut sum = 0.0;
            let mut count = 0;
            for a in 0..labels.len() {
                for pp in 0..labels.len() {
                    for nn in 0..labels.len() {
                        if pp == a || labels[pp] != labels[a] || labels[nn] == labels[a] {
                            continue;
                        }
                        let gap = euclid(emb.row(a), emb.row(pp)) - euclid(emb.row(a), emb.row(nn));
                        sum += match margin {
                            MarginSpec::Softplus => (1.0 + gap.exp()).ln(),
                            MarginSpec::Hard(m) => (m + gap).max(0.0),
                        };
                        count += 1;
                    }
                }
            }
            ba_err = ba_err.max((got - sum / count as f64).abs());
        }
    }
    let pass = bh_ok && bw_err <= 1e-12 && ba_err <= 1e-12;
    verdict(
        2,
        "weight-scheme oracles",
        pass,
        &format!("BH exact={bh_ok}, BW max error {bw_err:.1e}, BA max error {ba_err:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_batch_sample_frequencies() {
    let labels = [0, 0, 0, 0, 1, 1, 2, 2, 3, 3];
    let row = [0.0, 0.3, 1.1, 2.0, 0.5, 1.7, 2.2, 0.9, 1.4, 3.0];
    let scheme = SamplingScheme::new(SamplingVariant::BatchSample);
    let draws = 200_000;
    let mut r = rng(3);
    let first = compute_weights(scheme, 0, &row, &labels, Some(&mut r)).unwrap();
    let mut pos_counts = vec![0usize; first.positives.len()];
    let mut neg_counts = vec![0usize; first.negatives.len()];
    for _ in 0..draws {
        let w = compute_weights(scheme, 0, &row, &labels, Some(&mut r)).unwrap();
        pos_counts[w.w_p.iter().position(|&x| x == 1.0).unwrap()] += 1;
        neg_counts[w.w_n.iter().position(|&x| x == 1.0).unwrap()] += 1;
    }
    let pos_p = softmax_oracle(&first.positives.iter().map(|&j| row[j]).collect::<Vec<_>>());
    let neg_p = softmax_oracle(&first.negatives.iter().map(|&j| -row[j]).collect::<Vec<_>>());
    let mut linf: f64 = 0.0;
    for (counts, probs) in [(&pos_counts, &pos_p), (&neg_counts, &neg_p)] {
        for (c, p) in counts.iter().zip(probs) {
            linf = linf.max((*c as f64 / draws as f64 - p).abs());
        }
    }
    let pass = linf <= 0.005;
    verdict(3, "batch-sample statistics", pass, &format!("L-inf {linf:.5} over {draws} draws"));
    assert!(pass);
}

fn perfect_clustering_set() -> (EmbeddingSet, EmbeddingSet) {
    let spec = SynthSpec { sigma_view: 0.0, sigma_noise: 0.0, ..SynthSpec::default() };
    let ds = synthesize(&spec).unwrap().dataset;
    (ds.raw_embeddings(Split::Query), ds.raw_embeddings(Split::Gallery))
}

#[test]
fn criterion_4_metric_oracles() {
    let mut ap_ok = true;
    let mut checked = 0;
    for len in 1..=12usize {
        for bits in 0u32..(1 << len) {
            let rel: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
            let n_gt = rel.iter().filter(|&&x| x).count();
            if n_gt == 0 {
                continue;
            }
            let got = average_precision(&rel, n_gt).unwrap();
            ap_ok &= (got - ap_oracle(&rel, n_gt)).abs() <= 1e-12;
            checked += 1;
        }
    }

    let mut cmc_ok = true;
    let cutoffs: Vec<usize> = (1..=10).collect();
    for t in 0..1000u64 {
        let mut r = rng(40_000 + t);
        let (nq, ng) = (r.random_range(1..6), r.random_range(4..25));
        let q = EmbeddingSet::new(
            random_matrix(&mut r, nq, 3, 1.0),
            (0..nq).map(|_| r.random_range(0..4)).collect(),
            (0..nq).map(|_| r.random_range(0..3)).collect(),
            vec![Split::Query; nq],
        )
        .unwrap();
        let mut gid: Vec<u32> = (0..ng).map(|_| r.random_range(0..4)).collect();
        gid[..4].copy_from_slice(&[0, 1, 2, 3]);
        let g = EmbeddingSet::new(
            random_matrix(&mut r, ng, 3, 1.0),
            gid,
            (0..ng).map(|_| r.random_range(0..3)).collect(),
            vec![Split::Gallery; ng],
        )
        .unwrap();
        let spec = if t % 2 == 0 {
            ProtocolSpec { cutoffs: cutoffs.clone(), ..ProtocolSpec::repeated_gallery(3) }
        } else {
            ProtocolSpec { cutoffs: cutoffs.clone(), ..ProtocolSpec::cross_camera() }
        };
        match evaluate(&q, &g, &spec, MetricKind::Euclidean, t) {
            Ok(rep) => cmc_ok &= rep.cmc.windows(2).all(|w| w[0] <= w[1]),
            Err(reid_embed::Error::Protocol(_)) => {}
            Err(e) => panic!("{e}"),
        }
    }

    let (q, g) = perfect_clustering_set();
    let cc = evaluate(&q, &g, &ProtocolSpec::cross_camera(), MetricKind::Euclidean, 0).unwrap().map;
    let rg = evaluate(&q, &g, &ProtocolSpec::repeated_gallery(10), MetricKind::Euclidean, 0).unwrap().map;
    let pass = ap_ok && cmc_ok && cc == 1.0 && rg == 1.0;
    verdict(
        4,
        "metric oracles",
        pass,
        &format!("AP exact on {checked} vectors={ap_ok}, CMC monotone={cmc_ok}, perfect mAP {cc} / {rg}"),
    );
    assert!(pass);
}

fn train_and_score(variant: SamplingVariant, normalize: bool, data: &reid_embed::data::Dataset) -> f64 {
    let mut config = TrainConfig::new(LossKind::Triplet, variant, 0);
    config.epochs = 200;
    config.embedding_dim = 8;
    config.normalize = normalize;
    let out = train(data, &config).unwrap();
    let q = embed(&out.params, data, Split::Query).unwrap();
    let g = embed(&out.params, data, Split::Gallery).unwrap();
    evaluate(&q, &g, &ProtocolSpec::cross_camera(), MetricKind::Euclidean, 0).unwrap().map
}

#[test]
fn criterion_5_end_to_end_desk_run() {
    let start = Instant::now();
    let data = synthesize(&SynthSpec::default()).unwrap().dataset;
    let bs = train_and_score(SamplingVariant::BatchSample, false, &data);
    let ba = train_and_score(SamplingVariant::BatchAll, false, &data);
    let bw = train_and_score(SamplingVariant::BatchWeighted, false, &data);
    let bs_norm = train_and_score(SamplingVariant::BatchSample, true, &data);
    let secs = start.elapsed().as_secs_f64();
    let spread = [ba, bs, bw].iter().cloned().fold(f64::MIN, f64::max) - [ba, bs, bw].iter().cloned().fold(f64::MAX, f64::min);
    let pass = bs >= 0.95 && spread <= 0.05;
    verdict(
        5,
        "end-to-end desk run",
        pass,
        &format!(
            "BS mAP {bs:.4}, BA {ba:.4}, BW {bw:.4}, spread {spread:.4}; normalized BS {bs_norm:.4} (trend only); {secs:.1}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_determinism() {
    let exe = env!("CARGO_BIN_EXE_reid-embed");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.txt");
    let run = |args: &[&str]| {
        let out = Command::new(exe).args(args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["synth", "--out", data.to_str().unwrap()]);
    let mut outputs = Vec::new();
    for i in 0..2 {
        let ckpt = dir.path().join(format!("m{i}.ckpt"));
        let trace = dir.path().join(format!("t{i}.csv"));
        run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--seed",
            "11",
            "--epochs",
            "25",
            "--out",
            ckpt.to_str().unwrap(),
            "--trace",
            trace.to_str().unwrap(),
        ]);
        outputs.push((std::fs::read(&ckpt).unwrap(), std::fs::read(&trace).unwrap()));
    }
    let files_equal = outputs[0] == outputs[1];

    let ds = synthesize(&SynthSpec::default()).unwrap().dataset;
    let plans_equal = (0..20u64).all(|s| build_epoch(&ds, 18, 4, s).unwrap() == build_epoch(&ds, 18, 4, s).unwrap());
    let pass = files_equal && plans_equal;
    verdict(
        6,
        "determinism",
        pass,
        &format!("checkpoint and trace byte-identical={files_equal}, epoch plans replay={plans_equal}"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_adam() {
    let cfg = AdamConfig::default();

    let mut s = AdamState::new(cfg, &[4]).unwrap();
    let mut p = vec![0.5, -1.25, 3.0, 1e-9];
    let before = p.clone();
    for _ in 0..10 {
        s.step(&mut [&mut p], &[&[0.0; 4]]).unwrap();
    }
    let noop = p == before;

    // f(x) = x^2
    let mut s = AdamState::new(cfg, &[1]).unwrap();
    let mut x = vec![1.0];
    let mut converged_at = None;
    for step in 1..=10_000 {
        let g = [2.0 * x[0]];
        s.step(&mut [&mut x], &[&g]).unwrap();
        if converged_at.is_none() && x[0].abs() < 1e-3 {
            converged_at = Some(step);
        }
    }
    let converged = x[0].abs() < 1e-3;

    let mut s = AdamState::new(cfg, &[3]).unwrap();
    let g = [0.7, -2.0, 1e-4];
    let mut p = vec![0.0; 3];
    s.step(&mut [&mut p], &[&g]).unwrap();
    let mut first_err: f64 = 0.0;
    for (pi, gi) in p.iter().zip(&g) {
        let m_hat = (1.0 - cfg.beta1) * gi / (1.0 - cfg.beta1);
        let v_hat = (1.0 - cfg.beta2) * gi * gi / (1.0 - cfg.beta2);
        let expected = -cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        first_err = first_err.max((pi - expected).abs());
    }

    let pass = noop && converged && first_err <= 1e-12;
    verdict(
        7,
        "optimizer",
        pass,
        &format!(
            "zero-gradient no-op={noop}, |x| after 1e4 steps {:.2e} (first below 1e-3 at step {converged_at:?}), first-step error {first_err:.1e}",
            x[0].abs()
        ),
    );
    assert!(pass);
}

fn set(rows: &[[f64; 2]], ids: &[u32], cams: &[u32], split: Split) -> EmbeddingSet {
    EmbeddingSet::new(Matrix::from_rows(rows).unwrap(), ids.to_vec(), cams.to_vec(), vec![split; rows.len()]).unwrap()
}

#[test]
fn criterion_8_protocol_fidelity() {
    // Hand fixture: rows 0 and 4 share the query's identity and camera.
    let gallery = set(
        &[[0.0, 0.0], [0.5, 0.0], [0.1, 0.0], [3.0, 0.0], [0.0, 0.1], [2.0, 0.0]],
        &[0, 0, 1, 1, 0, 2],
        &[0, 1, 0, 1, 0, 2],
        Split::Gallery,
    );
    let all: Vec<usize> = (0..6).collect();
    let mut fixtures_ok = query_candidates(ProtocolKind::CrossCamera, 0, 0, &gallery, &all) == vec![1, 2, 3, 5];
    fixtures_ok &= query_candidates(ProtocolKind::RepeatedGallery, 0, 0, &gallery, &all) == all;
    // remaining ranking for the query at the origin: 2 (id 1), 1 (id 0), 5, 3 -> AP 1/2
    let query = set(&[[0.0, 0.0], [9.0, 9.0]], &[0, 2], &[0, 2], Split::Query);
    let rep = evaluate(&query, &gallery, &ProtocolSpec::cross_camera(), MetricKind::Euclidean, 0).unwrap();
    fixtures_ok &= rep.per_query[0].ap == Some(0.5);
    // identity 2 is only seen by camera 2, so the second query is excluded
    fixtures_ok &= rep.per_query[1].ap.is_none() && rep.excluded == 1 && rep.map == 0.5;

    // Random fixtures against the oracle filter.
    for t in 0..300u64 {
        let mut r = rng(80_000 + t);
        let ng = r.random_range(1..30);
        let ids: Vec<u32> = (0..ng).map(|_| r.random_range(0..5)).collect();
        let cams: Vec<u32> = (0..ng).map(|_| r.random_range(0..3)).collect();
        let g = EmbeddingSet::new(random_matrix(&mut r, ng, 2, 1.0), ids, cams, vec![Split::Gallery; ng]).unwrap();
        let (qid, qcam) = (r.random_range(0..5), r.random_range(0..3));
        let expected: Vec<usize> =
            (0..ng).filter(|&i| !(g.identities[i] == qid && g.cameras[i] == qcam)).collect();
        fixtures_ok &= query_candidates(ProtocolKind::CrossCamera, qid, qcam, &g, &(0..ng).collect::<Vec<_>>()) == expected;
    }

    // Repeated gallery: replay each trial's draw and average by hand.
    let data = synthesize(&SynthSpec { sigma_noise: 0.8, sigma_view: 1.5, ..SynthSpec::default() }).unwrap().dataset;
    let (q, g) = (data.raw_embeddings(Split::Query), data.raw_embeddings(Split::Gallery));
    let seed = 1234;
    let rep = evaluate(&q, &g, &ProtocolSpec::repeated_gallery(10), MetricKind::Euclidean, seed).unwrap();
    let mut replay_err: f64 = 0.0;
    let mut hand_sum = 0.0;
    for trial in 0..10 {
        let rows = repeated_gallery_draw(&g, seed, trial);
        let ids: std::collections::BTreeSet<u32> = rows.iter().map(|&i| g.identities[i]).collect();
        assert_eq!(ids.len(), rows.len(), "one exemplar per identity");
        assert_eq!(rows, repeated_gallery_draw(&g, seed, trial));
        let (m, _) = map_oracle(&q, &g, &rows, false);
        replay_err = replay_err.max((m - rep.trial_maps[trial]).abs());
        hand_sum += m;
    }
    replay_err = replay_err.max((hand_sum / 10.0 - rep.map).abs());
    let distinct_trials = rep.trial_maps.windows(2).any(|w| w[0] != w[1]);

    let (cc_oracle, _) = map_oracle(&q, &g, &(0..g.len()).collect::<Vec<_>>(), true);
    let cc = evaluate(&q, &g, &ProtocolSpec::cross_camera(), MetricKind::Euclidean, 0).unwrap().map;
    replay_err = replay_err.max((cc - cc_oracle).abs());

    let pass = fixtures_ok && replay_err <= 1e-12 && distinct_trials;
    verdict(
        8,
        "protocol fidelity",
        pass,
        &format!("exclusion fixtures={fixtures_ok}, replay max error {replay_err:.1e}, trials differ={distinct_trials}"),
    );
    assert!(pass);
}
