use std::path::Path;
use std::process::Command;

use cmtnet::data::load_cube;
use cmtnet::eval::read_ppm;
use cmtnet::kv::KeyValues;
use spectra_cli::*;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spectra"))
}

/// A scene and model small enough to train in a couple of seconds.
fn small(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        out: dir.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.synth.height = 12;
    cfg.synth.width = 12;
    cfg.synth.bands = 9;
    cfg.synth.classes = 3;
    cfg.model.patch_size = 5;
    cfg.model.embed_dim = 16;
    cfg.model.mlp_hidden = 16;
    cfg.model.ssfe_3d_filters = 2;
    cfg.model.ssfe_3d_kernel = [5, 3, 3];
    cfg.train.epochs = 3;
    cfg.train.batch_size = 8;
    cfg.train.train_fraction = 0.1;
    cfg
}

#[test]
fn config_dump_reparses_to_equal_value() {
    let mut cfg = RunConfig::default();
    assert_eq!(RunConfig::from_kv(&KeyValues::parse(&cfg.dump(), "dump").unwrap()).unwrap(), cfg);

    cfg.data = Some("scenes/a.manifest".into());
    cfg.checkpoint = Some("runs/x.ckpt".into());
    cfg.normalize = false;
    cfg.synth.sigma = 0.1 + 0.2;
    cfg.model.ssfe_3d_kernel = [5, 1, 3];
    cfg.model.case = 3;
    cfg.train.adam.lr = 1.0 / 3.0;
    cfg.train.seed = u64::MAX;
    let back = RunConfig::from_kv(&KeyValues::parse(&cfg.dump(), "dump").unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.dump(), cfg.dump());
}

#[test]
fn every_key_is_dumped_and_overrides_win() {
    let cfg = RunConfig {
        data: Some("d".into()),
        checkpoint: Some("c".into()),
        ..RunConfig::default()
    };
    let dumped: Vec<String> = cfg.to_kv().keys().map(String::from).collect();
    let mut known: Vec<String> = known_keys().map(String::from).collect();
    known.sort();
    assert_eq!(dumped, known);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "# comment\nepochs = 7\nlr = 0.01\ncase = 2\n").unwrap();
    let cfg = RunConfig::load(Some(&file), &parse_overrides(&["lr=0.5".into()]).unwrap()).unwrap();
    assert_eq!((cfg.train.epochs, cfg.train.adam.lr, cfg.model.case), (7, 0.5, 2));
    assert_eq!(cfg.train.batch_size, 100);
}

#[test]
fn bad_configs_are_usage_errors() {
    for pairs in [vec!["nope=1"], vec!["epochs=many"], vec!["lr"], vec!["ssfe_3d_kernel=7x3"]] {
        let pairs: Vec<String> = pairs.into_iter().map(String::from).collect();
        let err = parse_overrides(&pairs).and_then(|kv| RunConfig::load(None, &kv)).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 0;
    assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    assert!(RunConfig::load(Some(Path::new("/nonexistent/run.cfg")), &KeyValues::default()).is_err());
}

#[test]
fn synth_writes_loadable_identical_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let a = RunConfig {
        out: dir.path().join("a"),
        ..RunConfig::default()
    };
    let b = RunConfig {
        out: dir.path().join("b"),
        ..a.clone()
    };
    let mut text = Vec::new();
    let ma = cmd_synth(&a, &mut text).unwrap();
    cmd_synth(&b, &mut Vec::new()).unwrap();
    let text = String::from_utf8(text).unwrap();
    assert!(text.contains("32×32×20") && text.contains("pixels"));

    let (cube, gt) = load_cube(&ma).unwrap();
    assert_eq!((cube.height(), cube.width(), cube.bands(), gt.num_classes()), (32, 32, 20, 4));
    assert_eq!(gt.class_counts().iter().sum::<usize>(), 1024);
    for f in ["scene.manifest", "scene.bsq", "scene.gt"] {
        let x = std::fs::read(a.out.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.out.join(f)).unwrap(), "{f}");
    }

    let mut bad = a.clone();
    bad.synth.height = 2;
    bad.synth.width = 2;
    bad.synth.classes = 5;
    assert_eq!(cmd_synth(&bad, &mut Vec::new()).unwrap_err().exit_code(), 2);
}

#[test]
fn train_eval_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.data = Some(cmd_synth(&cfg, &mut Vec::new()).unwrap());
    let mut log = Vec::new();
    let trained = cmd_train(&cfg, &mut log).unwrap();
    let log = String::from_utf8(log).unwrap();
    assert!(log.contains("epoch    3/3"), "{log}");
    assert_eq!(trained.log.epochs.len(), 3);
    for f in ["model.ckpt", "train_log.tsv", "loss_log.tsv", "config.txt"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let saved = KeyValues::read(&dir.path().join("config.txt")).unwrap();
    assert_eq!(RunConfig::from_kv(&saved).unwrap(), cfg);

    // eval finds the scene through the checkpoint
    let eval_cfg = RunConfig {
        data: None,
        ..cfg.clone()
    };
    let mut table = Vec::new();
    let report = cmd_eval(&eval_cfg, &mut table).unwrap();
    let table = String::from_utf8(table).unwrap();
    assert!(table.contains("OA(%)") && table.contains("k×100"), "{table}");
    let metrics = KeyValues::read(&dir.path().join("metrics.txt")).unwrap();
    assert_eq!(metrics.parse_req::<f64>("oa").unwrap(), report.oa);

    let (_, gt) = load_cube(cfg.data.as_ref().unwrap()).unwrap();
    let (h, w, px) = read_ppm(&std::fs::read(dir.path().join("classification_map.ppm")).unwrap()).unwrap();
    assert_eq!((h, w, px.len()), (12, 12, 144));
    assert!(px.iter().all(|p| gt.palette().contains(p)));
    let (_, _, truth) = read_ppm(&std::fs::read(dir.path().join("ground_truth.ppm")).unwrap()).unwrap();
    for (l, p) in gt.labels().iter().zip(&truth) {
        assert_eq!(*p, gt.palette()[*l as usize - 1]);
    }

    let raster = cmd_predict_map(&cfg, &mut Vec::new()).unwrap();
    assert_eq!(raster.len(), 144);
    assert!(raster.iter().all(|&l| (1..=3).contains(&l)));
    assert!(dir.path().join("prediction_map.ppm").is_file());
}

#[test]
fn eval_rejects_a_mismatched_scene() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.data = Some(cmd_synth(&cfg, &mut Vec::new()).unwrap());
    cmd_train(&cfg, &mut Vec::new()).unwrap();
    let mut other = small(&dir.path().join("other"));
    other.synth.classes = 4;
    let mut eval_cfg = cfg.clone();
    eval_cfg.data = Some(cmd_synth(&other, &mut Vec::new()).unwrap());
    assert_eq!(cmd_eval(&eval_cfg, &mut Vec::new()).unwrap_err().exit_code(), 2);
    eval_cfg.checkpoint = Some(dir.path().join("missing.ckpt"));
    assert_eq!(cmd_eval(&eval_cfg, &mut Vec::new()).unwrap_err().exit_code(), 1);
}

#[test]
fn ablation_rows_come_in_case_order_for_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.train.epochs = 2;
    cfg.data = Some(cmd_synth(&cfg, &mut Vec::new()).unwrap());
    let mut text = Vec::new();
    let serial = cmd_ablate(&cfg, 1, &mut text).unwrap();
    assert_eq!(serial.iter().map(|r| r.case).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
    let tsv = std::fs::read_to_string(dir.path().join("ablation.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 6);
    assert!(String::from_utf8(text).unwrap().contains("Case"));
    assert_eq!(cmd_ablate(&cfg, 3, &mut Vec::new()).unwrap(), serial);
    assert_eq!(std::fs::read_to_string(dir.path().join("ablation.tsv")).unwrap(), tsv);
}

#[test]
fn gradcheck_passes_on_a_small_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.model.heads = 2;
    let mut text = Vec::new();
    let report = cmd_gradcheck(&cfg, &mut text).unwrap();
    assert!(report.max_rel_error <= GRADCHECK_TOLERANCE);
    assert!(String::from_utf8(text).unwrap().contains("≤ 1e-5: PASS"));
    let tsv = std::fs::read_to_string(dir.path().join("gradcheck.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), report.groups.len() + 1);
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let st = bin().args(["synth", "--out", out, "--height", "6", "--width", "6"]).output().unwrap();
    assert_eq!(st.status.code(), Some(0));
    assert!(dir.path().join("scene.manifest").is_file());

    let bad = bin().args(["synth", "--out", out, "--height", "2", "--width", "2", "--classes", "9"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("classes"));

    for args in [
        vec!["frobnicate"],
        vec!["train"],
        vec!["train", "--set", "typo=1"],
        vec!["gradcheck", "--case", "9"],
    ] {
        assert_eq!(bin().args(&args).output().unwrap().status.code(), Some(2), "{args:?}");
    }
    let missing = bin()
        .args(["train", "--data", dir.path().join("none.manifest").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));

    let cfg = dir.path().join("show.cfg");
    std::fs::write(&cfg, "epochs = 3\n").unwrap();
    let shown = bin()
        .args(["--config", cfg.to_str().unwrap(), "--set", "eval_batch=1", "--case", "1", "--seed", "4", "gradcheck", "--show-config", "--out"])
        .arg(dir.path().join("gc"))
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&shown.stdout);
    assert_eq!(shown.status.code(), Some(0), "{text}");
    for line in ["epochs = 3", "eval_batch = 1", "case = 1", "seed = 4"] {
        assert!(text.contains(line), "{line} missing from\n{text}");
    }
    assert!(text.contains("≤ 1e-5: PASS"));
}
