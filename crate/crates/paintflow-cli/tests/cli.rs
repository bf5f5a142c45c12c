//! End-to-end CLI tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> PathBuf {
    // target/debug/paintflow next to this test binary's directory.
    let mut path = std::env::current_exe().expect("test exe path");
    path.pop();
    if path.ends_with("deps") {
        path.pop();
    }
    path.join("paintflow")
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("paintflow_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create workdir");
    dir
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(bin()).args(args).output().expect("spawn paintflow");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn tiny_config(steps: usize, seed: u64) -> String {
    format!(
        "[canvas]\n\
         width = 64\nheight = 64\nchannels = 3\nmargin = 2\n\
         background_value = -1\nforeground_value = 1\n\
         [model]\n\
         width = 16\ndepth = 1\nheads = 2\npatch_size = 8\n\
         time_embed_dim = 8\ncond_tokens = 64\ncond_depth = 1\nmlp_hidden = 32\n\
         [train]\n\
         steps = {steps}\nbatch_size = 2\nlearning_rate = 0.001\n\
         swap_probability = 0.5\nseed = {seed}\ncheckpoint_every = 0\n\
         optimizer = adam\nadam_beta1 = 0.9\nadam_beta2 = 0.999\n\
         adam_eps = 0.00000001\nweight_decay = 0\n\
         [codec]\nkind = identity_patch\npatch_size = 8\n"
    )
}

#[test]
fn unknown_flag_exits_with_usage_code() {
    let (code, _, stderr) = run(&["gen-data", "--does-not-exist"]);
    assert_eq!(code, 2, "usage errors must exit 2: {stderr}");
}

#[test]
fn missing_file_is_a_runtime_error_with_class() {
    let (code, _, stderr) = run(&["decode-text", "--image", "/nonexistent/x.png"]);
    assert_eq!(code, 1);
    assert!(stderr.starts_with("error: missing-file:"), "stderr was {stderr:?}");
}

#[test]
fn gen_data_then_decode_text_round_trips_a_caption() {
    let dir = workdir("decode");
    let data = dir.join("data");
    let (code, stdout, stderr) = run(&["gen-data", "--n", "4", "--seed", "5", "--out", data.to_str().unwrap()]);
    assert_eq!(code, 0, "gen-data failed: {stderr}");
    assert!(stdout.contains("wrote 4 samples"));

    // Recover each sample's caption from its painted PNG alone.
    for i in 0..4 {
        let scene_text = std::fs::read_to_string(data.join(format!("{i:04}_scene"))).unwrap();
        let txt_png = data.join(format!("{i:04}_txt.png"));
        let (code, stdout, stderr) = run(&["decode-text", "--image", txt_png.to_str().unwrap()]);
        assert_eq!(code, 0, "decode-text failed: {stderr}");
        let decoded = stdout.trim();
        let mut fields = std::collections::BTreeMap::new();
        for line in scene_text.lines() {
            let (k, v) = line.split_once('=').unwrap();
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let caption = format!("{} {} {} {}", fields["size"], fields["color"], fields["shape"], fields["position"]);
        assert_eq!(decoded, caption);
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn train_caption_generate_cycle_eval_smoke() {
    let dir = workdir("train");
    let data = dir.join("data");
    let (code, _, stderr) = run(&["gen-data", "--n", "6", "--seed", "2", "--out", data.to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");

    let config_path = dir.join("run.cfg");
    std::fs::write(&config_path, tiny_config(3, 11)).unwrap();
    let out_dir = dir.join("run");
    let (code, stdout, stderr) = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "train failed: {stderr}");
    assert!(stdout.contains("trained to step 3"), "stdout: {stdout}");
    let ckpt = out_dir.join("checkpoint_final.unim");
    assert!(ckpt.exists());
    assert!(out_dir.join("metrics.log").exists());

    // caption
    let rgb = data.join("0000_rgb.png");
    let painted_out = dir.join("painted.png");
    let (code, stdout, stderr) = run(&[
        "caption",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        rgb.to_str().unwrap(),
        "--out",
        painted_out.to_str().unwrap(),
        "--seed",
        "3",
        "--steps",
        "2",
    ]);
    assert_eq!(code, 0, "caption failed: {stderr}");
    assert!(painted_out.exists());
    let _ = stdout; // untrained output text is arbitrary but must exist

    // determinism: same seed, same painted canvas bytes
    let painted_out2 = dir.join("painted2.png");
    run(&[
        "caption",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        rgb.to_str().unwrap(),
        "--out",
        painted_out2.to_str().unwrap(),
        "--seed",
        "3",
        "--steps",
        "2",
    ]);
    assert_eq!(std::fs::read(&painted_out).unwrap(), std::fs::read(&painted_out2).unwrap());

    // generate
    let gen_out = dir.join("gen.png");
    let (code, _, stderr) = run(&[
        "generate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--text",
        "small red circle left",
        "--out",
        gen_out.to_str().unwrap(),
        "--steps",
        "2",
    ]);
    assert_eq!(code, 0, "generate failed: {stderr}");
    assert!(gen_out.exists());

    // cycle triptych is 3 canvases wide plus two 2px separators
    let cyc_out = dir.join("cycle.png");
    let (code, _, stderr) = run(&[
        "cycle",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        rgb.to_str().unwrap(),
        "--out",
        cyc_out.to_str().unwrap(),
        "--steps",
        "2",
    ]);
    assert_eq!(code, 0, "cycle failed: {stderr}");
    let trip = paintflow::image::PixelImage::load_png(&cyc_out).unwrap();
    assert_eq!(trip.width(), 64 * 3 + 4);
    assert_eq!(trip.height(), 64);

    // eval writes a parseable report and a gallery
    let report = dir.join("report");
    let (code, stdout, stderr) = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--steps",
        "2",
    ]);
    assert_eq!(code, 0, "eval failed: {stderr}");
    assert!(stdout.contains("caption_exact_match"));
    let parsed = paintflow::pipelines::MetricsReport::from_text(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.n, 6);
    let gallery: Vec<_> = std::fs::read_dir(dir.join("report_gallery")).unwrap().collect();
    assert_eq!(gallery.len(), 6);

    // eval with identical flags reproduces the report byte for byte
    let report2 = dir.join("report2");
    run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        report2.to_str().unwrap(),
        "--steps",
        "2",
    ]);
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&report2).unwrap());

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn train_is_reproducible_across_runs() {
    let dir = workdir("repro");
    let data = dir.join("data");
    run(&["gen-data", "--n", "4", "--seed", "9", "--out", data.to_str().unwrap()]);
    let config_path = dir.join("run.cfg");
    std::fs::write(&config_path, tiny_config(2, 21)).unwrap();

    let mut hashes = Vec::new();
    for tag in ["a", "b"] {
        let out_dir = dir.join(tag);
        let (code, _, stderr) = run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{stderr}");
        hashes.push(std::fs::read(out_dir.join("checkpoint_final.unim")).unwrap());
    }
    assert_eq!(hashes[0], hashes[1], "identical flags and seeds must give identical artifacts");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn resume_flag_continues_from_checkpoint() {
    let dir = workdir("resume");
    let data = dir.join("data");
    run(&["gen-data", "--n", "4", "--seed", "3", "--out", data.to_str().unwrap()]);

    // Full run to 4 steps.
    let cfg4 = dir.join("cfg4");
    std::fs::write(&cfg4, tiny_config(4, 31)).unwrap();
    let full_dir = dir.join("full");
    run(&["train", "--data", data.to_str().unwrap(), "--config", cfg4.to_str().unwrap(), "--out", full_dir.to_str().unwrap()]);

    // Half run, then resume. The resumed run continues to the checkpoint's
    // configured budget, which we extend by editing the config in a second
    // training pass: instead, train 2 steps, then resume with the 4-step
    // target encoded in a fresh checkpoint.
    let cfg2 = dir.join("cfg2");
    std::fs::write(&cfg2, tiny_config(2, 31)).unwrap();
    let half_dir = dir.join("half");
    run(&["train", "--data", data.to_str().unwrap(), "--config", cfg2.to_str().unwrap(), "--out", half_dir.to_str().unwrap()]);

    let mut ckpt = paintflow::checkpoint::load_checkpoint(half_dir.join("checkpoint_final.unim")).unwrap();
    ckpt.train.steps = 4;
    let mid = dir.join("mid.unim");
    paintflow::checkpoint::save_checkpoint(&ckpt, &mid).unwrap();

    let resumed_dir = dir.join("resumed");
    let (code, _, stderr) = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg4.to_str().unwrap(),
        "--out",
        resumed_dir.to_str().unwrap(),
        "--resume",
        mid.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{stderr}");

    let full = load_params(full_dir.join("checkpoint_final.unim"));
    let resumed = load_params(resumed_dir.join("checkpoint_final.unim"));
    assert_eq!(full, resumed, "resumed run must match the uninterrupted one");
    std::fs::remove_dir_all(&dir).unwrap();
}

fn load_params(path: impl AsRef<Path>) -> Vec<Vec<f32>> {
    let ckpt = paintflow::checkpoint::load_checkpoint(path).unwrap();
    ckpt.params.iter().map(|(_, t)| t.data().to_vec()).collect()
}
