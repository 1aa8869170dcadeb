use std::fs;
use std::path::Path;
use std::process::Command;

fn wfp(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_wfp")).args(args).output().expect("wfp runs");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "wfp {args:?} failed:\n{stderr}");
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_config(dir: &Path, scenario: &str, data: Option<&Path>) -> std::path::PathBuf {
    let mut text = format!(
        "seed = 3\nscenario = \"preset:{scenario}\"\n\
         [features]\napp_window = 9\n\
         [app_model]\nchannels = 8\nlevels = 2\nepochs = 2\n\
         [action_model]\nchannels = 8\nlevels = 1\nepochs = 2\n\
         [openmax]\ntail_size = 5\n\
         [training]\nmax_app_samples_per_class = 60\n\
         [profiler]\nbehavior_window = 4\n"
    );
    if let Some(d) = data {
        text.push_str(&format!("[paths]\ndata_dir = {:?}\n", d.display().to_string()));
    }
    let p = dir.join(format!("{scenario}.toml"));
    fs::write(&p, text).unwrap();
    p
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn generate_train_eval_runtime_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = small_config(tmp.path(), "tiny", None);
    let cfg_s = cfg.to_str().unwrap();
    wfp(&["generate", "--config", cfg_s, "--out", data.to_str().unwrap()]);
    assert!(data.join("capture_lab.csv").exists());
    assert!(data.join("log_recorder.txt").exists());
    let m = manifest(&data);
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seed"], 3);

    let cfg = small_config(tmp.path(), "tiny", Some(&data));
    let cfg_s = cfg.to_str().unwrap();
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();
    wfp(&["train", "--config", cfg_s, "--out", run_s]);
    assert!(run.join("model.wfpb").exists());
    assert!(run.join("kde_features.csv").exists());
    let first_hash = manifest(&run)["config_hash"].clone();

    let stdout = wfp(&["eval", "--config", cfg_s, "--out", run_s]);
    assert!(stdout.contains("app accuracy"));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    let acc = eval[0]["app_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(fs::read_to_string(run.join("eval.txt")).unwrap().contains("precision"));
    assert_eq!(manifest(&run)["config_hash"], first_hash);

    wfp(&["runtime", "--config", cfg_s, "--out", run_s]);
    let rt: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("runtime.json")).unwrap()).unwrap();
    assert!(rt["total_ms_per_sample"].as_f64().unwrap() > 0.0);

    // A different seed changes the recorded config hash.
    wfp(&["eval", "--config", cfg_s, "--out", run_s, "--seed", "4", "--loss-rate", "0.1"]);
    let m = manifest(&run);
    assert_ne!(m["config_hash"], first_hash);
    assert_eq!(m["loss_rate"], 0.1);
}

#[test]
fn profile_and_identify_in_memory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "tiny", None);
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();
    wfp(&["train", "--config", cfg.to_str().unwrap(), "--out", run_s]);

    let office = small_config(tmp.path(), "office_small", None);
    let office_s = office.to_str().unwrap();
    let model = run.join("model.wfpb");
    let prof = tmp.path().join("prof");
    let prof_s = prof.to_str().unwrap();
    fs::create_dir_all(&prof).unwrap();
    fs::copy(&model, prof.join("model.wfpb")).unwrap();
    wfp(&["profile", "--config", office_s, "--out", prof_s]);
    for room in ["office1", "office2", "office3"] {
        let p: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(prof.join(format!("profiles_{room}.json"))).unwrap()).unwrap();
        assert!(p["k_op"].as_u64().unwrap() >= 2);
    }
    assert!(prof.join("identification_scores.json").exists());
    wfp(&["identify", "--config", office_s, "--out", prof_s]);
    let ids = fs::read_to_string(prof.join("identifications.jsonl")).unwrap();
    assert!(ids.lines().count() > 0);
}

#[test]
fn missing_model_is_a_clear_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "tiny", None);
    let out = Command::new(env!("CARGO_BIN_EXE_wfp"))
        .args(["eval", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("wfp train"));
}

#[test]
fn open_world_flag_withholds_apps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("ow.toml");
    fs::write(
        &cfg,
        "seed = 3\nscenario = \"preset:tiny\"\n[features]\napp_window = 9\n\
         [app_model]\nchannels = 8\nlevels = 1\nepochs = 1\n[action_model]\nchannels = 8\nlevels = 1\nepochs = 1\n\
         [openmax]\ntail_size = 5\n[training]\nmax_app_samples_per_class = 40\nwithheld_apps = [\"com.synth.app02\"]\n",
    )
    .unwrap();
    let run = tmp.path().join("run");
    let args = ["--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(), "--open-world"];
    wfp(&[&["train"][..], &args[..]].concat());
    let stdout = wfp(&[&["eval"][..], &args[..]].concat());
    assert!(stdout.contains("unknown recall"), "{stdout}");
}
