use std::path::Path;

use localnorm::eval::{evaluate, EvalKind, EvalMode};
use localnorm::experiment::{
    cmd_eval, cmd_histogram, cmd_sweep_groups, cmd_train, cmd_transfer, metrics_csv, Arch, DataSource, ExperimentConfig,
    NormConfig, OutputDir, SweepSection, SyntheticConfig, TransferSection,
};
use localnorm::model::load_checkpoint;
use localnorm::noise::NoiseFamily;
use localnorm::norm::NormVariant;
use localnorm::Error;

fn synthetic(variant: NormVariant, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_mnist("unused");
    cfg.seed = 3;
    cfg.data.source = DataSource::Synthetic;
    cfg.data.dir = None;
    cfg.data.synthetic = Some(SyntheticConfig { train: 64, test: 24, side: 8, classes: 4 });
    cfg.data.train_limit = None;
    cfg.data.test_limit = None;
    cfg.model.arch = Arch::Small;
    cfg.model.norm = NormConfig { variant, epsilon: None, stat_mode: None, momentum: None };
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 8;
    cfg.train.lr = 0.05;
    cfg.eval.batch_size = 8;
    cfg.eval.modes = match variant {
        NormVariant::Local { .. } => vec!["batch".into(), "voting".into()],
        _ => vec!["frozen_bn".into()],
    };
    cfg.noise.sigmas = vec![0.0, 0.5, 2.0];
    cfg.sweep = Some(SweepSection { groups: vec![1, 2] });
    cfg.histogram.as_mut().unwrap().images = 5;
    cfg.transfer = Some(TransferSection { groups: 2, fine_tune_epochs: 1 });
    cfg
}

fn body_lines(path: &Path, header: &str) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with(header), "{} lacks the provenance row", path.display());
    text[header.len()..].lines().map(str::to_owned).collect()
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = synthetic(NormVariant::Local { groups: 2 }, 1);
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(cfg.hash().unwrap(), ExperimentConfig::from_toml(&text).unwrap().hash().unwrap());
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
    let desk = ExperimentConfig::desk_mnist("data/mnist");
    assert_eq!(ExperimentConfig::from_toml(&desk.to_toml().unwrap()).unwrap(), desk);

    let typo = text.replace("epochs =", "epohcs =");
    assert!(matches!(ExperimentConfig::from_toml(&typo), Err(Error::Config(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = synthetic(NormVariant::Local { groups: 3 }, 1);
    assert!(cfg.validate().unwrap_err().to_string().contains("does not divide"));
    cfg = synthetic(NormVariant::Local { groups: 2 }, 1);
    cfg.noise.families = vec![NoiseFamily::Apn];
    cfg.noise.sigmas = vec![2.0];
    assert!(cfg.validate().is_err());
    cfg = synthetic(NormVariant::Local { groups: 2 }, 1);
    cfg.eval.modes = vec!["frozen_bn".into()];
    assert!(cfg.validate().is_err());
    cfg = ExperimentConfig::desk_mnist("/no/such/dir");
    assert!(cfg.validate().unwrap_err().to_string().contains("missing MNIST file"));
}

#[test]
fn zero_epoch_training_writes_valid_empty_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(NormVariant::Local { groups: 2 }, 0);
    let out = OutputDir::create(dir.path(), false, &cfg).unwrap();
    let r = cmd_train(&cfg, &out).unwrap();
    assert!(r.log.metrics.is_empty());
    assert_eq!(body_lines(&out.path("metrics.csv"), out.header()), vec!["epoch,split,metric,value"]);
    let trace = body_lines(&out.path("scaling_trace.csv"), out.header());
    assert_eq!(trace[0], "epoch,layer,param,group_mean,group_var");
    assert!(trace.len() > 1);
    for row in &trace[1..] {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[0], "0");
        assert_eq!(f[4].parse::<f64>().unwrap(), 0.0, "{row}");
    }
    assert_eq!(body_lines(&out.path("timing.csv"), out.header()), vec!["run,epoch,seconds"]);
    let echoed = std::fs::read_to_string(out.path("config.toml")).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&echoed).unwrap(), cfg);
}

#[test]
fn outputs_are_protected_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(NormVariant::Local { groups: 2 }, 0);
    cmd_train(&cfg, &OutputDir::create(dir.path(), false, &cfg).unwrap()).unwrap();
    let before = std::fs::read(dir.path().join("metrics.csv")).unwrap();
    let e = cmd_train(&cfg, &OutputDir::create(dir.path(), false, &cfg).unwrap()).unwrap_err();
    assert!(e.to_string().contains("--force"), "{e}");
    assert_eq!(std::fs::read(dir.path().join("metrics.csv")).unwrap(), before);
    cmd_train(&cfg, &OutputDir::create(dir.path(), true, &cfg).unwrap()).unwrap();
}

#[test]
fn train_then_eval_agree_and_stamp_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic(NormVariant::Local { groups: 2 }, 2);
    cfg.eval.confusion = true;
    let out = OutputDir::create(dir.path().join("train"), false, &cfg).unwrap();
    let trained = cmd_train(&cfg, &out).unwrap();
    let metrics = body_lines(&out.path("metrics.csv"), out.header());
    assert_eq!(metrics.len(), 1 + 2 * 4);
    assert_eq!(metrics[1..4].iter().map(|l| l.split(',').nth(2).unwrap()).collect::<Vec<_>>(), ["lr", "loss", "accuracy"]);

    let ckpt = out.path("model.lnck");
    let loaded = load_checkpoint::<f32>(&ckpt).unwrap();
    assert_eq!(loaded.model.params(), trained.model.params());

    let eval_out = OutputDir::create(dir.path().join("eval"), false, &cfg).unwrap();
    let rows = cmd_eval(&cfg, &ckpt, &eval_out).unwrap();
    assert_eq!(rows.len(), 2 * cfg.noise.cells().len());
    let clean: Vec<_> = rows.iter().filter(|r| r.mode == "batch" && r.sigma == 0.0).collect();
    let last = trained.log.metrics.last().unwrap().test_accuracy.unwrap();
    assert!(clean.iter().all(|r| r.accuracy == last), "{clean:?} vs {last}");
    let direct = evaluate(&trained.model, &trained.test, &EvalMode::new(EvalKind::Batch), None, &cfg.eval_options()).unwrap();
    assert_eq!(direct.accuracy, last);

    let results = body_lines(&eval_out.path("results.csv"), eval_out.header());
    assert_eq!(results[0], "mode,noise_family,sigma_n,accuracy");
    assert_eq!(results.len(), 1 + rows.len());
    let grid = body_lines(&eval_out.path("confusion/voting_agn_0p5.csv"), eval_out.header());
    assert_eq!(grid.len(), 1 + 4);
    for f in std::fs::read_dir(eval_out.root()).unwrap() {
        let p = f.unwrap().path();
        if p.is_file() {
            assert!(std::fs::read_to_string(&p).unwrap().starts_with(eval_out.header()), "{}", p.display());
        }
    }
}

#[test]
fn training_is_reproducible() {
    let cfg = synthetic(NormVariant::Local { groups: 2 }, 2);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let r = cmd_train(&cfg, &OutputDir::create(dir.path(), false, &cfg).unwrap()).unwrap();
        (metrics_csv(&r.log), std::fs::read(dir.path().join("model.lnck")).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn group_sweep_covers_each_k() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic(NormVariant::Local { groups: 2 }, 1);
    cfg.eval.modes = vec!["batch".into()];
    cfg.noise.families = vec![NoiseFamily::Agn];
    let out = OutputDir::create(dir.path(), false, &cfg).unwrap();
    let rows = cmd_sweep_groups(&cfg, &out).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 1, 1, 2, 2, 2]);
    let csv = body_lines(&out.path("sweep.csv"), out.header());
    assert_eq!(csv[0], "k,mode,noise_family,sigma_n,accuracy");
    assert!(csv[1].starts_with("1,batch,agn,0,"));

    cfg.sweep = Some(SweepSection { groups: vec![3] });
    let out = OutputDir::create(dir.path().join("bad"), false, &cfg).unwrap();
    assert!(cmd_sweep_groups(&cfg, &out).unwrap_err().to_string().contains("does not divide"));
}

#[test]
fn histogram_counts_every_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic(NormVariant::Local { groups: 2 }, 0);
    let out = OutputDir::create(dir.path(), false, &cfg).unwrap();
    cmd_histogram(&cfg, None, &out).unwrap();
    let hist = body_lines(&out.path("histogram.csv"), out.header());
    let cells = cfg.noise.cells().len();
    assert_eq!(hist.len(), 1 + cells * 256);
    let total: u64 = hist[1..257].iter().map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 5 * 8 * 8);
    let stats = body_lines(&out.path("channel_stats.csv"), out.header());
    assert_eq!(stats.len(), 1 + cells * 2);
    assert!(stats.iter().any(|l| l.contains(",raw,")));
}

#[test]
fn transfer_rebuilds_batchnorm_as_localnorm() {
    let dir = tempfile::tempdir().unwrap();
    let bn = synthetic(NormVariant::Batch, 2);
    let train_out = OutputDir::create(dir.path().join("bn"), false, &bn).unwrap();
    cmd_train(&bn, &train_out).unwrap();
    let mut cfg = bn.clone();
    cfg.eval.modes = vec!["batch".into()];
    let out = OutputDir::create(dir.path().join("transfer"), false, &cfg).unwrap();
    let t = cmd_transfer(&cfg, &train_out.path("model.lnck"), &out).unwrap();
    assert_eq!(t.model.norm_spec().variant, NormVariant::Local { groups: 2 });
    assert!(t.after_fine_tune.is_some());
    let csv = body_lines(&out.path("transfer.csv"), out.header());
    assert_eq!(csv[0], "stage,mode,accuracy");
    assert!(csv[1].starts_with("source,frozen_bn,"));
    assert!(csv[2].starts_with("transferred,batch,"));
    assert!(csv[3].starts_with("fine_tuned,batch,"));
    let back = load_checkpoint::<f32>(&out.path("model.lnck")).unwrap();
    assert_eq!(back.model.params(), t.model.params());
}

#[test]
fn documented_config_is_the_default_recipe() {
    let readme = include_str!("../../../README.md");
    let start = readme.find("```toml\n").unwrap() + 8;
    let len = readme[start..].find("```").unwrap();
    let cfg = ExperimentConfig::from_toml(&readme[start..start + len]).unwrap();
    assert_eq!(cfg, ExperimentConfig::desk_mnist("data/mnist"));
}
