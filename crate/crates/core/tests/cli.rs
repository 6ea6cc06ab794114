use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::{DType, Device};
use celsr::degrade::PipelineConfig;
use celsr::media::{read_clip, write_clip, Clip, Frame};
use celsr::vsr::{Generator, GeneratorArch};

fn celsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_celsr"))
        .args(args)
        .env("CELSR_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn textured_clip(id: &str, n: usize, h: usize, w: usize) -> Clip {
    let frames = (0..n)
        .map(|t| {
            Frame::from_fn(h, w, |c, y, x| {
                let v = ((x + 2 * t) * 7 + y * 13 + c * 29) % 64;
                v as f32 / 63.0
            })
        })
        .collect();
    Clip::new(id, 24.0, frames).unwrap()
}

fn tiny_model(dir: &Path) -> PathBuf {
    let arch = GeneratorArch {
        channels: 4,
        blocks: [1, 1, 1],
    };
    let g = Generator::seeded(arch, 3, DType::F32, &Device::Cpu).unwrap();
    let path = dir.join("generator.safetensors");
    g.save(&path).unwrap();
    path
}

fn file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| f.file_name().unwrap() != "run.json")
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn infer_writes_x4_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tiny_model(tmp.path());
    let input = tmp.path().join("clip");
    write_clip(&textured_clip("c", 15, 64, 64), &input).unwrap();
    let out = tmp.path().join("sr");
    let o = celsr(&["infer", "--model", p(&model), "--in", p(&input), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sr = read_clip(&out).unwrap();
    assert_eq!(sr.len(), 15);
    assert_eq!(sr.dims(), (256, 256));
    assert!(out.join("resolved_config.toml").is_file());
    let stamp = fs::read_to_string(out.join("run.json")).unwrap();
    assert!(stamp.contains(env!("CARGO_PKG_VERSION")), "{stamp}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = celsr(&["upscale-everything"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn degrade_is_reproducible_with_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("hr");
    write_clip(&textured_clip("hr", 3, 64, 64), &input).unwrap();
    let cfg = tmp.path().join("eq2.cfg");
    fs::write(&cfg, PipelineConfig::default().to_toml()).unwrap();
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let o = celsr(&["degrade", "--config", p(&cfg), "--seed", seed, "--in", p(&input), "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let a = run("a", "7");
    let b = run("b", "7");
    let lr = read_clip(&a).unwrap();
    assert_eq!((lr.len(), lr.dims()), (3, (16, 16)));
    assert_eq!(file_bytes(&a), file_bytes(&b));
    let c = run("c", "8");
    assert_ne!(
        fs::read(a.join("degradation.json")).unwrap(),
        fs::read(c.join("degradation.json")).unwrap()
    );
}

#[test]
fn config_problems_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("hr");
    write_clip(&textured_clip("hr", 2, 32, 32), &input).unwrap();
    let out = tmp.path().join("o");
    for bad in ["no_such_key=1", "stage.6.crf=[40,10]", "stage.12.crf=[1,2]"] {
        let o = celsr(&["degrade", "--set", bad, "--in", p(&input), "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(2), "{bad}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));
    }
    let o = celsr(&["train", "--stage", "3", "--data", p(&input), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_encoder_exits_with_3_and_a_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("hr");
    write_clip(&textured_clip("hr", 2, 32, 32), &input).unwrap();
    let out = tmp.path().join("o");
    let o = celsr(&[
        "degrade",
        "--set",
        r#"backend={backend="ffmpeg", binary="/nonexistent/ffmpeg"}"#,
        "--in",
        p(&input),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.starts_with("error[environment]:"), "{err}");
    assert!(err.contains("hint:"), "{err}");
}

#[test]
fn help_lists_config_keys_with_defaults() {
    for (sub, key) in [
        ("degrade", "stage.0.kind = \"blur\""),
        ("train", "iterations = 300000"),
        ("train-lbo", "iterations = 100000"),
        ("infer", "input_scale = 1.0"),
        ("curate", "motion_threshold = 0.5"),
        ("rescale-serve", "candidates.patch_size = 128"),
        ("export-pairs", "target_pairs = 2000"),
        ("evaluate", "niqe = true"),
        ("benchmark", "trials = 10"),
    ] {
        let o = celsr(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0));
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains(key), "{sub} --help lacks `{key}`:\n{text}");
    }
}

#[test]
fn evaluate_and_curate_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tiny_model(tmp.path());
    let clip = tmp.path().join("lr");
    write_clip(&textured_clip("lr", 2, 32, 32), &clip).unwrap();
    let out = tmp.path().join("report");
    let o = celsr(&["evaluate", "--model", p(&model), "--clip", p(&clip), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("bilinear") && table.contains("NIQE"), "{table}");
    assert!(out.join("report.json").is_file() && out.join("per_frame.csv").is_file());

    let video = tmp.path().join("video");
    write_clip(&textured_clip("v1", 40, 32, 32), &video).unwrap();
    let ds = tmp.path().join("dataset");
    let o = celsr(&["curate", "--set", "motion_threshold=0", "--set", "scene.clip_len=10", "--video", p(&video), "--out", p(&ds)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = celsr::curate::DatasetManifest::load(&ds.join("dataset.json")).unwrap();
    assert_eq!(m.clips.len(), 1);
}

#[test]
fn degrade_takes_an_lbo_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("hr");
    write_clip(&textured_clip("hr", 2, 32, 32), &input).unwrap();
    let lbo = tmp.path().join("lbo");
    fs::create_dir(&lbo).unwrap();
    celsr::lbo::LboWeights::seeded(1, DType::F32, &Device::Cpu)
        .unwrap()
        .save(&lbo.join(celsr::cli::LBO_FILE))
        .unwrap();
    let out = tmp.path().join("lr");
    let o = celsr(&["degrade", "--lbo", p(&lbo), "--in", p(&input), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = celsr(&["degrade", "--lbo", p(&tmp.path().join("missing")), "--in", p(&input), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
