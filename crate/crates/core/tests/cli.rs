use std::path::Path;
use std::process::{Command, Output};

use stanet::backbone::{build_model, count_params, ArchSpec, ModelConfig, Variant};
use stanet::data::decode_pnm;
use stanet::tensor::read_rt01;

const SMALL_ARCH: &str = "\
conv,3,-,8,-,-,HS,2
mbconv,3,16,8,True,-,RE,2
mbconv,3,16,16,True,-,RE,2
mbconv,3,32,16,True,True,RE,1
mbconv,3,32,24,True,-,HS,2
mbconv,3,48,32,True,True,HS,1
mbconv,3,48,32,True,-,HS,2
conv,1,-,64,-,-,HS,1
pool,2,-,-,-,-,-,-
conv,1,-,32,-,-,HS,1
conv,1,-,k,-,-,-,1
";

fn stanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stanet"))
        .args(args)
        .env_remove("STANET_DATA")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stanet(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = stanet(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn totals(stdout: &str) -> (u64, f64, f64) {
    let line = stdout
        .lines()
        .find(|l| l.starts_with("total"))
        .expect("total row");
    let cols: Vec<&str> = line.split_whitespace().collect();
    (
        cols[1].parse().unwrap(),
        cols[2].parse().unwrap(),
        cols[3].parse().unwrap(),
    )
}

#[test]
fn help_lists_every_subcommand() {
    let help = ok(&["--help"]);
    for cmd in ["search", "build", "train", "eval", "attn-dump", "gen-synth"] {
        assert!(help.contains(cmd), "{cmd}");
    }
    assert!(ok(&["train", "--help"]).contains("STANET_DATA"));
}

#[test]
fn build_totals_match_the_counters() {
    for (variant, params, flops) in [
        (Variant::Baseline, 0.308e6, 43.1),
        (Variant::SeStam, 0.401e6, 51.1),
    ] {
        let stdout = ok(&["build", "--variant", variant.name(), "--classes", "22"]);
        let (total, _macs, total_flops) = totals(&stdout);
        let spec = ArchSpec::stanet().with_classes(22);
        let model = build_model(&spec, variant, &ModelConfig::default(), 0).unwrap();
        assert_eq!(total, count_params(&model).total_params());
        assert!((total as f64 / params - 1.0).abs() <= 0.10);
        assert!((total_flops / flops - 1.0).abs() <= 0.10);
    }
}

#[test]
fn build_writes_csv_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cost.csv");
    ok(&["build", "--variant", "se", "--csv", p(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("# command = build\n"));
    assert!(text.contains("# variant = se\n"));
    assert!(text.contains("\nlayer,params,macs,flops\nstem,224,2709504,"));
    assert!(text.lines().last().unwrap().starts_with("total,"));
}

#[test]
fn bad_arch_and_bad_flags_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("bad.arch");
    std::fs::write(&arch, "conv,3,-,8,-,-,HS,2\nmbconv,5,16\n").unwrap();
    assert!(fails(&["build", p(&arch)]).contains("line 2"));
    fails(&["build", "--no-such-flag"]);
    fails(&["build", "--variant", "huge"]);
    assert!(fails(&["eval", "--ckpt", "x.stck"]).contains("--data"));
}

#[test]
fn untrained_eval_is_near_chance_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("fresh.stck");
    ok(&[
        "gen-synth",
        "--classes",
        "4",
        "--per-class",
        "16",
        "--seed",
        "5",
        "--out",
        p(&data),
    ]);
    ok(&["build", "--classes", "4", "--seed", "1", "--out", p(&ckpt)]);

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--split",
        "all",
        "--out",
        p(&a),
    ]);
    ok(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--split",
        "all",
        "--out",
        p(&b),
    ]);
    let acc: f64 = stdout.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((acc - 0.25).abs() <= 0.15, "accuracy {acc}");
    for f in ["metrics.csv", "confusion.csv"] {
        let (x, y) = (
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
        );
        assert_eq!(x.len(), y.len());
        assert_eq!(
            String::from_utf8_lossy(&x).replace(p(&a), ""),
            String::from_utf8_lossy(&y).replace(p(&b), "")
        );
    }
    let confusion = std::fs::read_to_string(a.join("confusion.csv")).unwrap();
    let body: Vec<&str> = confusion.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body.len(), 5);
    assert!(body[0].starts_with("true\\pred,c00_"));

    let wrong = dir.path().join("wrong.stck");
    ok(&["build", "--classes", "3", "--out", p(&wrong)]);
    let err = fails(&["eval", "--ckpt", p(&wrong), "--data", p(&data)]);
    assert!(err.contains("3 classes") && err.contains("4"), "{err}");
}

#[test]
fn attention_dump_covers_every_site_and_map() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.stck");
    let out = dir.path().join("attn");
    ok(&[
        "gen-synth",
        "--classes",
        "2",
        "--per-class",
        "2",
        "--seed",
        "1",
        "--out",
        p(&data),
    ]);
    ok(&["build", "--classes", "2", "--out", p(&ckpt)]);
    ok(&[
        "attn-dump",
        "--ckpt",
        p(&ckpt),
        "--images",
        p(&data),
        "--out",
        p(&out),
    ]);

    let mut pgm = 0;
    let mut rt = 0;
    for entry in std::fs::read_dir(&out).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        let side = if name.contains("_block03_") { 28 } else { 14 };
        let bytes = std::fs::read(&path).unwrap();
        if name.ends_with(".pgm") {
            pgm += 1;
            assert!(
                bytes.starts_with(format!("P5\n{side} {side}\n255\n").as_bytes()),
                "{name}"
            );
            let img = decode_pnm(&bytes, &path).unwrap();
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        } else {
            rt += 1;
            let t = read_rt01(&mut bytes.as_slice()).unwrap();
            assert_eq!(t.dims(), [side, side], "{name}");
            assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0), "{name}");
        }
    }
    assert_eq!((pgm, rt), (4 * 2 * 3, 4 * 2 * 3));

    let baseline = dir.path().join("plain.stck");
    ok(&[
        "build",
        "--classes",
        "2",
        "--variant",
        "se",
        "--out",
        p(&baseline),
    ]);
    assert!(
        fails(&["attn-dump", "--ckpt", p(&baseline), "--images", p(&data)]).contains("no STAM")
    );
}

#[test]
fn search_is_deterministic_and_its_output_parses() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let arch = dir.path().join(format!("{tag}.arch"));
        let log = dir.path().join(format!("{tag}.csv"));
        let args = [
            "search",
            "--iters",
            "150",
            "--seed",
            "9",
            "--out",
            p(&arch),
            "--log",
            p(&log),
        ];
        let stdout = ok(&args);
        (
            stdout,
            std::fs::read_to_string(arch).unwrap(),
            std::fs::read_to_string(log).unwrap(),
        )
    };
    let (s1, a1, l1) = run("a");
    let (_, a2, l2) = run("b");
    assert_eq!((a1.clone(), l1.clone()), (a2, l2));
    assert!(s1.starts_with("best score"));
    assert!(l1.contains("# max_params = 320000\n"));
    assert!(l1.contains("# classes = 22\niter,score,params,macs,feasible\n"));
    assert_eq!(l1.lines().filter(|l| !l.starts_with('#')).count(), 151);
    let spec = ArchSpec::parse(&a1).unwrap().with_classes(22);
    let model = build_model(&spec, Variant::Baseline, &ModelConfig::default(), 0).unwrap();
    assert!(count_params(&model).total_params() <= 320_000);

    let err = fails(&[
        "search",
        "--max-params",
        "1000",
        "--iters",
        "20",
        "--out",
        p(&dir.path().join("x.arch")),
    ]);
    assert!(err.contains("no feasible candidate"), "{err}");
}

#[test]
fn train_honours_flag_file_default_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let arch = dir.path().join("small.arch");
    let config = dir.path().join("cfg.toml");
    std::fs::write(&arch, SMALL_ARCH).unwrap();
    std::fs::write(&config, "epochs = 5\nbatch_size = 4\nwarmup_epochs = 1.0\n").unwrap();
    ok(&[
        "gen-synth",
        "--classes",
        "3",
        "--per-class",
        "5",
        "--side",
        "64",
        "--seed",
        "2",
        "--out",
        p(&data),
    ]);

    let run = |tag: &str| {
        let out = dir.path().join(tag);
        let status = Command::new(env!("CARGO_BIN_EXE_stanet"))
            .args([
                "train",
                "--arch",
                p(&arch),
                "--config",
                p(&config),
                "--epochs",
                "2",
            ])
            .args(["--seed", "4", "--out", p(&out)])
            .env("STANET_DATA", &data)
            .output()
            .unwrap();
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        let stderr = String::from_utf8(status.stderr).unwrap();
        (out, stderr)
    };
    let (a, stderr) = run("a");
    let (b, _) = run("b");
    assert!(stderr.contains("# epochs = 2\n"), "flag beats file");
    assert!(stderr.contains("# batch_size = 4\n"), "file beats default");
    assert!(
        stderr.contains("# weight_decay = 0.025\n"),
        "defaults fill the rest"
    );
    assert!(stderr.contains("# seed = 4\n"));
    let history = |d: &Path| std::fs::read_to_string(d.join("history.csv")).unwrap();
    let body = |s: String| {
        s.lines()
            .filter(|l| !l.starts_with('#'))
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let (ha, hb) = (body(history(&a)), body(history(&b)));
    assert_eq!(ha, hb);
    assert_eq!(ha.len(), 3);
    assert!(ha[0].starts_with("epoch,lr,train_loss,train_acc,val_acc,val_f1"));
    for f in ["best.stck", "ema.stck", "last.stck", "config.toml"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read(a.join("last.stck")).unwrap(),
        std::fs::read(b.join("last.stck")).unwrap()
    );

    let err = fails(&[
        "train",
        "--arch",
        p(&arch),
        "--out",
        p(&dir.path().join("c")),
    ]);
    assert!(err.contains("--data"), "{err}");
}
