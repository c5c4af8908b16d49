use std::path::Path;
use std::process::Command;

use partalign::align::AlignmentVariant;
use partalign::harness::bench::{cmd_bench, BenchConfig, BenchRow, TableSpec, REPORT_JSON, REPORT_TEXT};
use partalign::harness::gradcheck::{self, GradcheckOptions};
use partalign::harness::{
    cmd_eval, cmd_train, datasets, evaluate, read_jsonl, train, Checkpoint, RunConfig, Split, METRICS_FILE,
};
use partalign::model::ALIGN_PREFIX;
use partalign::synth::SynthSpec;
use partalign::tensor::{GradCheck, OpKind};

fn tiny(alignment: AlignmentVariant) -> RunConfig {
    RunConfig {
        alignment,
        epochs: 1,
        batch_size: 8,
        widths: [4, 6, 8],
        d_repr: 8,
        heads: 2,
        expansion: 2,
        num_parts: 3,
        window: 1,
        synth: SynthSpec {
            image_size: 32,
            jitter_radius: 1,
            train_count: 24,
            test_count: 16,
            ..SynthSpec::default()
        },
        ..RunConfig::default()
    }
}

fn bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        epochs: 0,
        ..tiny(AlignmentVariant::SelfAttn { layers: 1 })
    };
    let outcome = cmd_train(&config, dir.path()).unwrap();
    let records = read_jsonl(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(records, outcome.records);
    assert!(records.iter().all(|r| r.split == Split::Test && r.epoch == 0));
    assert_eq!(records.len(), 1);
    assert!(outcome.final_train_accuracy().is_none());

    let ckpt = Checkpoint::load(dir.path()).unwrap();
    let fresh = partalign::model::Model::<f32>::new(config.model_config(), config.seed).unwrap();
    assert_eq!(ckpt.params, fresh.params);
}

#[test]
fn training_is_deterministic() {
    for alignment in [AlignmentVariant::GraphMatch, AlignmentVariant::CrossAttn] {
        let config = RunConfig {
            jitter: true,
            ..tiny(alignment)
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        cmd_train(&config, a.path()).unwrap();
        cmd_train(&config, b.path()).unwrap();
        for file in [METRICS_FILE, "checkpoint.json", "checkpoint.bin"] {
            assert_eq!(bytes(&a.path().join(file)), bytes(&b.path().join(file)), "{alignment} {file}");
        }
    }
}

#[test]
fn seeds_change_the_run() {
    let (train_set, test_set) = datasets(&tiny(AlignmentVariant::None)).unwrap();
    let a = train(&tiny(AlignmentVariant::None), &train_set, &test_set).unwrap();
    let b = train(&RunConfig { seed: 1, ..tiny(AlignmentVariant::None) }, &train_set, &test_set).unwrap();
    assert_ne!(a.model.params, b.model.params);
}

#[test]
fn metrics_hold_one_train_and_one_test_record_per_epoch() {
    let config = RunConfig {
        epochs: 2,
        ..tiny(AlignmentVariant::None)
    };
    let (train_set, test_set) = datasets(&config).unwrap();
    let outcome = train(&config, &train_set, &test_set).unwrap();
    let splits: Vec<(usize, Split)> = outcome.records.iter().map(|r| (r.epoch, r.split)).collect();
    assert_eq!(
        splits,
        vec![(0, Split::Test), (1, Split::Train), (1, Split::Test), (2, Split::Train), (2, Split::Test)]
    );
    for r in &outcome.records {
        assert!(r.loss_total.is_finite() && (0.0..=1.0).contains(&r.accuracy));
        assert!(r.wall_time.is_none());
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let config = tiny(AlignmentVariant::GraphMatch);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_train(&config, a.path()).unwrap();
    let loaded = Checkpoint::load(a.path()).unwrap();
    assert!(loaded.bank.as_ref().and_then(|bank| bank.reference()).is_some());
    loaded.save(b.path()).unwrap();
    for file in ["checkpoint.json", "checkpoint.bin"] {
        assert_eq!(bytes(&a.path().join(file)), bytes(&b.path().join(file)));
    }
    assert_eq!(Checkpoint::load(b.path()).unwrap(), loaded);

    std::fs::write(b.path().join("checkpoint.bin"), [0u8; 8]).unwrap();
    assert!(Checkpoint::load(b.path()).is_err());
}

#[test]
fn untrained_model_evaluates_at_chance() {
    let mut config = tiny(AlignmentVariant::None);
    config.widths = [16, 32, 64];
    config.d_repr = 32;
    config.synth = SynthSpec {
        train_count: 8,
        test_count: 400,
        ..SynthSpec::default()
    };
    config.window = 2;
    let (_, test_set) = datasets(&config).unwrap();
    for seed in 0..3 {
        let model = partalign::model::Model::<f32>::new(config.model_config(), seed).unwrap();
        let report = evaluate(&model, &test_set).unwrap();
        assert!((report.accuracy - 0.125).abs() <= 0.05, "seed {seed}: {}", report.accuracy);
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, 400);
    }
}

#[test]
fn eval_ignores_alignment_parameters_and_repeats_exactly() {
    let config = tiny(AlignmentVariant::SelfAttn { layers: 3 });
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&config, dir.path()).unwrap();
    let (_, test_set) = datasets(&config).unwrap();
    let first = cmd_eval(dir.path(), &test_set).unwrap();
    assert_eq!(cmd_eval(dir.path(), &test_set).unwrap(), first);

    let mut ckpt = Checkpoint::load(dir.path()).unwrap();
    for (name, t) in ckpt.params.iter_mut() {
        if name.starts_with(ALIGN_PREFIX) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let zeroed = tempfile::tempdir().unwrap();
    ckpt.save(zeroed.path()).unwrap();
    assert_eq!(cmd_eval(zeroed.path(), &test_set).unwrap(), first);

    let mismatched = datasets(&RunConfig {
        synth: SynthSpec { num_classes: 4, ..config.synth.clone() },
        ..config.clone()
    })
    .unwrap()
    .1;
    assert!(cmd_eval(dir.path(), &mismatched).is_err());
}

#[test]
fn invalid_run_configs_are_rejected() {
    let base = tiny(AlignmentVariant::None);
    for bad in [
        RunConfig { batch_size: 0, ..base.clone() },
        RunConfig { lr: 0.0, ..base.clone() },
        RunConfig { momentum: 1.0, ..base.clone() },
        RunConfig { jitter_strength: 1.5, ..base.clone() },
        RunConfig { window: 5, ..base.clone() },
        RunConfig { num_parts: 9, alignment: AlignmentVariant::GraphMatch, ..base.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn run_config_json_fills_defaults_and_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"epochs": 3, "alignment": "graphmatch", "synth": {"train_count": 10}}"#).unwrap();
    let c = RunConfig::from_json_file(&path).unwrap();
    assert_eq!(c.epochs, 3);
    assert_eq!(c.alignment, AlignmentVariant::GraphMatch);
    assert_eq!(c.synth.train_count, 10);
    assert_eq!(c.synth.test_count, SynthSpec::default().test_count);
    assert_eq!(c.lr, RunConfig::default().lr);

    let text = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);

    std::fs::write(&path, r#"{"epochz": 3}"#).unwrap();
    assert!(RunConfig::from_json_file(&path).is_err());
}

/// Registry entry exercising each primitive, by op name.
fn primitive_entry(op: OpKind) -> &'static str {
    match op {
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::AddRowBias => "add_row_bias",
        OpKind::Scale => "scale",
        OpKind::Relu => "relu",
        OpKind::Gelu => "gelu",
        OpKind::Exp => "exp",
        OpKind::Log => "log",
        OpKind::Matmul => "matmul",
        OpKind::Transpose => "transpose",
        OpKind::Reshape => "reshape",
        OpKind::Concat => "concat",
        OpKind::Sum => "sum",
        OpKind::Mean => "mean_over_axis",
        OpKind::Max => "max_over_axis",
        OpKind::Softmax => "softmax",
        OpKind::LogSoftmax => "log_softmax",
        OpKind::LayerNorm => "layer_norm",
        OpKind::Gather => "gather",
        OpKind::Conv2d => "conv2d",
        OpKind::MaxPool2d => "max_pool2d",
        OpKind::Leaf => unreachable!(),
    }
}

const OPS: [&str; 22] = [
    "add", "sub", "mul", "addrowbias", "scale", "relu", "gelu", "exp", "log", "matmul", "transpose", "reshape",
    "concat", "sum", "mean", "max", "softmax", "logsoftmax", "layernorm", "gather", "conv2d", "maxpool2d",
];

#[test]
fn registry_covers_every_primitive_and_catches_tampering() {
    let registry = gradcheck::registry();
    let names: Vec<&str> = registry.iter().map(|(n, _)| *n).collect();
    for required in [
        "mhsa",
        "transformer_block",
        "self_attn_aligner_1",
        "self_attn_aligner_3",
        "cross_attn_aligner",
        "phi",
        "kl_div",
        "reg_loss",
        "cross_entropy",
        "total_loss",
        "model_none",
        "model_graphmatch",
        "model_attn3",
        "model_crossattn",
    ] {
        assert!(names.contains(&required), "{required}");
    }
    for op_name in OPS {
        let op = OpKind::parse(op_name).unwrap();
        let entry = primitive_entry(op);
        let (_, f) = registry.iter().find(|(n, _)| *n == entry).expect(entry);
        let clean = f(0, &GradCheck { tol: 1e-4, ..GradCheck::default() }).unwrap();
        assert!(clean.max_rel_err <= 1e-4, "{entry}: {clean:?}");
        let tampered = GradCheck {
            tol: 1e-4,
            tamper: Some((op, 1.5)),
            ..GradCheck::default()
        };
        let r = f(0, &tampered).unwrap();
        assert!(r.max_rel_err > 1e-4, "{entry} missed a tampered backward rule");
    }
}

#[test]
fn gradcheck_runner_reports_every_component() {
    let reports = gradcheck::run(&GradcheckOptions { seeds: 1, tamper: None }).unwrap();
    assert_eq!(reports.len(), gradcheck::registry().len());
    assert!(reports.iter().all(|r| r.seeds == 1 && r.coords_checked > 0));
    let tampered = gradcheck::run(&GradcheckOptions {
        seeds: 1,
        tamper: Some(OpKind::Softmax),
    })
    .unwrap();
    let failed: Vec<&str> = tampered.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    assert!(failed.contains(&"softmax") && failed.contains(&"model_attn3"), "{failed:?}");
    assert!(!failed.contains(&"conv2d"));
}

fn micro_bench() -> BenchConfig {
    let base = RunConfig {
        epochs: 1,
        ..tiny(AlignmentVariant::None)
    };
    let table = TableSpec {
        name: "pose".into(),
        synth: base.synth.clone(),
        rows: vec![
            BenchRow::new("Graph matching", AlignmentVariant::GraphMatch),
            BenchRow::new("Self-attention, 1 layer", AlignmentVariant::SelfAttn { layers: 1 }),
        ],
        jitter: vec![false, true],
        reference: 0,
    };
    BenchConfig {
        base,
        seeds: vec![0, 1],
        tables: vec![table],
    }
}

#[test]
fn bench_reports_every_cell_with_deltas() {
    let config = micro_bench();
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_bench(&config, Some(dir.path())).unwrap();
    let table = report.table("pose").unwrap();
    assert_eq!(table.cells.len(), 4);
    assert_eq!(table.reference, "Graph matching");
    for jitter in [false, true] {
        let reference = table.cell(AlignmentVariant::GraphMatch, jitter).unwrap();
        let attn = table.cell(AlignmentVariant::SelfAttn { layers: 1 }, jitter).unwrap();
        assert_eq!(reference.delta, 0.0);
        assert!((attn.delta - (attn.mean - reference.mean)).abs() < 1e-15);
        for cell in [reference, attn] {
            assert_eq!(cell.accuracies.len(), 2);
            let mean = cell.accuracies.iter().sum::<f64>() / 2.0;
            assert!((cell.mean - mean).abs() < 1e-15);
            assert!(cell.min <= cell.mean && cell.mean <= cell.max);
        }
    }
    // every cell re-runs to the same number as a standalone training run
    let cell = table.cell(AlignmentVariant::SelfAttn { layers: 1 }, true).unwrap();
    let standalone = RunConfig {
        alignment: AlignmentVariant::SelfAttn { layers: 1 },
        jitter: true,
        seed: 1,
        ..config.base.clone()
    };
    let (tr, te) = datasets(&standalone).unwrap();
    let acc = train(&standalone, &tr, &te).unwrap().final_test_accuracy().unwrap();
    assert_eq!(cell.accuracies[1], acc);

    assert!(dir.path().join(REPORT_JSON).exists());
    let text = std::fs::read_to_string(dir.path().join(REPORT_TEXT)).unwrap();
    assert_eq!(text, report.render());
    assert!(dir.path().join("runs/pose/attn1-jitter-s1").join(METRICS_FILE).exists());
}

#[test]
fn bench_config_validation_and_defaults() {
    let default = BenchConfig::default();
    assert_eq!(default.seeds, vec![0, 1, 2]);
    let names: Vec<&str> = default.tables.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["pose", "food"]);
    default.validate().unwrap();

    let mut bad = micro_bench();
    bad.tables[0].reference = 5;
    assert!(bad.validate().is_err());
    let mut bad = micro_bench();
    bad.seeds.clear();
    assert!(bad.validate().is_err());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_partalign"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let status = |cmd: &mut Command| cmd.output().unwrap().status.code();

    assert_eq!(status(cli().arg("--bogus")), Some(1));
    assert_eq!(status(cli().arg("--help")), Some(0));
    assert_eq!(
        status(cli().args(["eval", "--checkpoint"]).arg(dir.path().join("missing"))),
        Some(3)
    );
    assert_eq!(status(cli().args(["train", "--lr", "-1", "--out"]).arg(dir.path())), Some(1));

    let out = cli().args(["gradcheck", "--seeds", "1", "--tamper", "softmax"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn cli_train_gen_data_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(AlignmentVariant::CrossAttn);
    let config_path = dir.path().join("run.json");
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();
    let run = dir.path().join("run");
    let out = cli()
        .args(["train", "--config"])
        .arg(&config_path)
        .args(["--epochs", "0", "--alignment", "graphmatch", "--out"])
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = Checkpoint::load(&run).unwrap();
    assert_eq!(ckpt.config.epochs, 0);
    assert_eq!(ckpt.config.alignment, AlignmentVariant::GraphMatch);
    assert_eq!(ckpt.config.widths, config.widths);

    let data = dir.path().join("data");
    let out = cli().args(["gen-data", "--config"]).arg(&config_path).arg("--out").arg(&data).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let out = cli()
        .args(["eval", "--checkpoint"])
        .arg(&run)
        .arg("--data")
        .arg(data.join("test.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let (_, test_set) = datasets(&ckpt.config).unwrap();
    let expected = cmd_eval(&run, &test_set).unwrap();
    assert_eq!(report["accuracy"].as_f64().unwrap(), expected.accuracy);
}
