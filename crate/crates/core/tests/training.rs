use reid_embed::checkpoint::Checkpoint;
use reid_embed::data::{synthesize, Split, SynthSpec};
use reid_embed::eval::{evaluate, ProtocolSpec};
use reid_embed::geometry::MetricKind;
use reid_embed::losses::{LossKind, SamplingVariant};
use reid_embed::sampler::build_epoch;
use reid_embed::train::{embed, epoch_seed, train, train_from, TrainConfig};

fn small_config(variant: SamplingVariant, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(LossKind::Triplet, variant, seed);
    c.embedding_dim = 8;
    c
}

#[test]
fn batch_sample_softplus_loss_drops_tenfold() {
    let data = synthesize(&SynthSpec::default()).unwrap().dataset;
    let mut c = small_config(SamplingVariant::BatchSample, 7);
    c.epochs = 120;
    let out = train(&data, &c).unwrap();
    let first = out.trace.first().unwrap().mean_loss;
    let last = out.trace.last().unwrap().mean_loss;
    assert!(last * 10.0 <= first, "first {first}, last {last}");
}

#[test]
fn every_variant_and_loss_trains_finitely() {
    let data = synthesize(&SynthSpec { identities: 8, held_out_identities: 4, ..SynthSpec::default() }).unwrap().dataset;
    for loss in [LossKind::Triplet, LossKind::Contrastive] {
        for variant in SamplingVariant::ALL {
            for normalize in [false, true] {
                let mut c = TrainConfig::new(loss, variant, 3);
                c.p = 4;
                c.epochs = 5;
                c.embedding_dim = 4;
                c.normalize = normalize;
                let out = train(&data, &c).unwrap();
                assert!(out.params.is_finite());
                assert!(out.trace.iter().all(|r| r.mean_loss.is_finite() && r.skipped == 0));
            }
        }
    }
}

#[test]
fn resuming_reproduces_the_epoch_plan_of_a_fresh_run() {
    let data = synthesize(&SynthSpec::default()).unwrap().dataset;
    let c = small_config(SamplingVariant::BatchWeighted, 1);
    let plan_a = build_epoch(&data, c.p, c.k, epoch_seed(c.seed, 3)).unwrap();
    let plan_b = build_epoch(&data, c.p, c.k, epoch_seed(c.seed, 3)).unwrap();
    assert_eq!(plan_a, plan_b);
    assert_ne!(plan_a, build_epoch(&data, c.p, c.k, epoch_seed(c.seed, 4)).unwrap());
    assert_eq!(plan_a.identities().len(), 32);
    assert!(plan_a.batches.iter().all(|b| b.validate(&data).is_ok()));
    assert!(plan_a.batches.last().unwrap().padded);
}

#[test]
fn checkpoint_reload_gives_identical_embeddings_and_metrics() {
    let data = synthesize(&SynthSpec::default()).unwrap().dataset;
    let mut c = small_config(SamplingVariant::BatchWeighted, 12);
    c.epochs = 10;
    let out = train(&data, &c).unwrap();
    let ckpt = Checkpoint { params: out.params.clone(), seed: c.seed, config: c.echo() };
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    let q = embed(&back.params, &data, Split::Query).unwrap();
    let g = embed(&back.params, &data, Split::Gallery).unwrap();
    assert_eq!(q, embed(&out.params, &data, Split::Query).unwrap());
    let rep = evaluate(&q, &g, &ProtocolSpec::cross_camera(), MetricKind::Euclidean, 0).unwrap();
    assert!(rep.map > 0.0 && rep.map <= 1.0);
    assert_eq!(rep.excluded, 0);

    // zero further epochs leaves the parameters alone
    let mut zero = c.clone();
    zero.epochs = 0;
    assert_eq!(train_from(&data, &zero, back.params.clone()).unwrap().params, back.params);
}
