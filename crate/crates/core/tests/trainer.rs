mod common;

use common::*;
use crossmatch::datasets::make_split;
use crossmatch::model::{Invocations, Stream};
use crossmatch::trainer::*;

fn tiny_split(cfg: &RunConfig) -> crossmatch::datasets::Split {
    make_split(&tiny_records(24, 6), &cfg.split_spec()).unwrap()
}

#[test]
fn zero_iterations_leaves_weights_untouched() {
    let mut cfg = tiny_config();
    cfg.train.iterations = 0;
    let split = tiny_split(&cfg);
    let init = Trainer::new(cfg.clone(), &split).unwrap().state().clone();
    let res = fit(&cfg, &split, &FitOptions::default()).unwrap();
    assert_eq!(res.state, init);
    assert!(res.log.losses.is_empty());
}

#[test]
fn supervised_only_has_no_unlabeled_terms() {
    let mut cfg = tiny_config();
    cfg.train.method = Method::SupervisedOnly;
    let split = tiny_split(&cfg);
    let mut t = Trainer::new(cfg, &split).unwrap();
    assert!(t.plan().is_empty());
    let row = t.train_step().unwrap();
    assert_eq!((row.report.ip, row.report.tkd, row.report.dkd), (0.0, 0.0, 0.0));
    assert_eq!(row.report.total, row.report.sup);
}

#[test]
fn fixmatch_uses_one_strong_stream() {
    let mut cfg = tiny_config();
    cfg.train.method = Method::Fixmatch;
    let split = tiny_split(&cfg);
    let mut t = Trainer::new(cfg, &split).unwrap();
    let row = t.train_step().unwrap();
    assert_eq!(row.invocations, Invocations { encoder: 1, decoder: 1 });
    assert_eq!((row.report.tkd, row.report.dkd), (0.0, 0.0));
}

#[test]
fn dualstream_restricts_tkd_students() {
    let mut cfg = tiny_config();
    cfg.train.method = Method::Dualstream;
    let split = tiny_split(&cfg);
    let t = Trainer::new(cfg, &split).unwrap();
    assert_eq!(t.loss_config().tkd_students, [Stream::WeakWeak, Stream::StrongStrong]);
    // dkd and ip still read every stream
    assert_eq!(t.plan().streams().len(), 7);
}

#[test]
fn step_cost_ordering_follows_stream_count() {
    let cfg = tiny_config();
    let split = tiny_split(&cfg);
    let cost = |m: Method, naive: bool| {
        let mut c = cfg.clone();
        c.train.method = m;
        c.train.naive_mode = naive;
        measure_step_cost(&c, &split, 1, 3).unwrap()
    };
    let stacked = cost(Method::Crossmatch, false);
    let naive = cost(Method::Crossmatch, true);
    let fix = cost(Method::Fixmatch, false);
    assert_eq!((stacked.encoder_calls, stacked.decoder_calls), (2, 1));
    assert_eq!((naive.encoder_calls, naive.decoder_calls), (3, 7));
    assert!(fix.mean_ms < stacked.mean_ms, "{fix:?} vs {stacked:?}");
}

#[test]
fn config_round_trips_and_hash_tracks_content() {
    let cfg = tiny_config();
    let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    let mut other = cfg.clone();
    other.loss.eta = 0.2;
    assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
}

#[test]
fn invalid_configs_are_rejected() {
    for text in ["[train]\nbatch_size = 3\n", "[data]\nlabeled_fraction = 0.0\n", "[train]\nmethod = \"meanteacher\"\n", "[nope]\n"] {
        let res = RunConfig::from_toml(text).and_then(|mut c| c.validate());
        let err = res.unwrap_err();
        assert_eq!(err.exit_code(), 2, "{text:?} gave {err:?}");
    }
}

#[test]
fn checkpoint_round_trip_and_hash_guard() {
    let cfg = tiny_config();
    let split = tiny_split(&cfg);
    let mut t = Trainer::new(cfg.clone(), &split).unwrap();
    t.train_step().unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &cfg, t.state()).unwrap();
    let (state, back) = load_checkpoint(dir.path(), Some(&cfg.hash().unwrap())).unwrap();
    assert_eq!(&state, t.state());
    assert_eq!(back, cfg);
    let err = load_checkpoint(dir.path(), Some("0000")).unwrap_err();
    assert!(err.to_string().contains("config hash"));
}

#[test]
fn run_without_unlabeled_pool_is_refused() {
    let mut cfg = tiny_config();
    cfg.data.labeled_fraction = 1.0;
    let split = tiny_split(&cfg);
    assert!(Trainer::new(cfg.clone(), &split).is_err());
    cfg.train.method = Method::SupervisedOnly;
    assert!(Trainer::new(cfg, &split).is_ok());
}
