use acnet_core::config::{DataSource, RunConfig};
use acnet_core::network::Architecture;
use acnet_core::Error;
use proptest::prelude::*;

#[test]
fn empty_text_gives_defaults() {
    let cfg = RunConfig::parse("# nothing here\n\n").unwrap();
    assert_eq!(cfg, RunConfig::default());
    let t = cfg.train_config();
    assert_eq!((t.batch_size, t.momentum, t.weight_decay, t.poly_power), (4, 0.9, 1e-4, 0.9));
    assert_eq!(t.loss.aux_weight, 0.4);
    assert!(t.loss.ohem.is_none());
}

#[test]
fn overrides_apply_in_any_order() {
    let text = "synth.noise_sigma = 0.01\nnetwork.architecture = acnet\nnetwork.blocks = 2\ndata.source = synth\n\
                loss.ohem = true\noptim.base_lr = 0.02\naugment.scale_range = 0.5,2.2\n";
    let cfg = RunConfig::parse(text).unwrap();
    assert_eq!(cfg.network.architecture, Architecture::Acnet { blocks: 2 });
    assert_eq!(cfg.base_lr, 0.02);
    assert_eq!(cfg.augment.scale_range, Some((0.5, 2.2)));
    let DataSource::Synth { synth, .. } = &cfg.data else { panic!() };
    assert_eq!(synth.noise_sigma, 0.01);
    let ohem = cfg.train_config().loss.ohem.unwrap();
    assert_eq!((ohem.threshold, ohem.min_kept), (0.7, 4 * 64 * 64 / 16));
}

#[test]
fn strict_errors_carry_key_paths() {
    let key_of = |text: &str| match RunConfig::parse(text) {
        Err(Error::Config { key, .. }) => key,
        other => panic!("{text}: {other:?}"),
    };
    assert_eq!(key_of("optim.learning_rate = 0.1"), "optim.learning_rate");
    assert_eq!(key_of("optim.base_lr = fast"), "optim.base_lr");
    assert_eq!(key_of("optim.base_lr = 0.1\noptim.base_lr = 0.2"), "optim.base_lr");
    assert_eq!(key_of("network.delta = -1"), "network.delta");
    assert_eq!(key_of("network.architecture = resnet"), "network.architecture");
    assert_eq!(key_of("data.source = manifest"), "data.train_manifest");
    assert_eq!(key_of("data.source = manifest\nsynth.height = 64"), "synth.height");
    assert_eq!(key_of("loss.ohem_threshold = 1.5"), "loss.ohem_threshold");
    assert_eq!(key_of("just words"), "line 1");
}

#[test]
fn manifest_source_round_trips() {
    let text = "data.source = manifest\ndata.train_manifest = a/train.txt\ndata.val_manifest = a/val.txt\n";
    let cfg = RunConfig::parse(text).unwrap();
    assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
    assert!(cfg.synth_config().is_none());
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (
        prop_oneof![Just(Architecture::Fcn), Just(Architecture::Gcm), (1usize..=3).prop_map(|b| Architecture::Acnet { blocks: b })],
        (1e-6f64..1.0, 0.0f64..0.99, 0.0f64..1e-2),
        (1usize..8, 1usize..10_000, 0usize..500),
        (0.1f64..20.0, 1usize..5, any::<bool>(), any::<bool>()),
        (proptest::option::of((0.3f64..1.0, 1.0f64..3.0)), 16usize..128, 0.0f64..=1.0),
        (0.01f64..1.0, proptest::option::of(1usize..10_000), any::<u64>()),
        (1usize..500, 0usize..100, 0.0f64..0.1),
    )
        .prop_map(|(arch, (lr, mom, wd), (bs, iters, every), (delta, reuse, aux, ohem), (scale, crop, flip), (thr, kept, seed), (ntrain, nval, noise))| {
            let mut c = RunConfig::default();
            c.network.architecture = arch;
            c.network.delta = delta;
            c.network.reuse_count = reuse;
            c.network.aux_enabled = aux;
            c.base_lr = lr;
            c.momentum = mom;
            c.weight_decay = wd;
            c.batch_size = bs;
            c.total_iters = iters;
            c.eval_every = every;
            c.ohem = ohem;
            c.ohem_threshold = thr;
            c.ohem_min_kept = kept;
            c.augment.scale_range = scale;
            c.augment.crop_size = crop;
            c.augment.hflip_prob = flip;
            c.seed = seed;
            if let DataSource::Synth { synth, train_count, val_count } = &mut c.data {
                *train_count = ntrain;
                *val_count = nval;
                synth.noise_sigma = noise;
            }
            c
        })
}

proptest! {
    #[test]
    fn serialize_parse_round_trip(cfg in arb_config()) {
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.serialize(), text);
    }
}
