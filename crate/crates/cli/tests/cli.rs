use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_causalcf"))
}

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn adjust_prints_the_other_aspects() {
    let graph = assets().join("graphs/review.json");
    for (treatment, expected) in [("S", ["A", "F", "N"]), ("F", ["A", "N", "S"])] {
        let out = bin()
            .args(["graph", "adjust"])
            .arg(&graph)
            .args(["--treatment", treatment])
            .output()
            .unwrap();
        let v = json(&out);
        assert_eq!(v["adjustment_set"], serde_json::json!(expected));
        assert_eq!(v["treatment"], treatment);
    }
    let out = bin()
        .args(["graph", "adjust"])
        .arg(&graph)
        .args(["--treatment", "Zzz"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Zzz"));
}

#[test]
fn validate_flags_duplicate_ids_and_ragged_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--seed", "5", "--out-dir"])
        .arg(dir.path())
        .args(["scm", "sample", "--scm", "builtin:desk", "--n", "12"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let data = dir.path().join("units.jsonl");
    let v = json(&bin().arg("validate").arg(&data).output().unwrap());
    assert_eq!(v["records"], 12);

    let text = std::fs::read_to_string(&data).unwrap();
    let first = text.lines().next().unwrap().to_string();

    let dup = dir.path().join("dup.jsonl");
    std::fs::write(&dup, format!("{text}{first}\n")).unwrap();
    let out = bin().arg("validate").arg(&dup).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("u000000"));

    let ragged = dir.path().join("ragged.jsonl");
    let short = first
        .replacen("\"features\":[0.0,", "\"features\":[", 1)
        .replacen("u000000", "extra", 1);
    std::fs::write(&ragged, format!("{text}{short}\n")).unwrap();
    let out = bin().arg("validate").arg(&ragged).output().unwrap();
    assert!(!out.status.success());

    let out = bin()
        .arg("validate")
        .arg(&data)
        .args(["--require", "train,test"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn exact_effect_on_the_toy_fixture() {
    let out = bin()
        .args([
            "scm",
            "cace",
            "--scm",
            "builtin:toy",
            "--model",
            "builtin:toy",
            "--iv",
            "Taste:bad->good",
        ])
        .output()
        .unwrap();
    let v = json(&out);
    let vector: Vec<f64> = serde_json::from_value(v["estimate"]["vector"].clone()).unwrap();
    assert_eq!(vector.len(), 5);
    assert!(vector.iter().sum::<f64>().abs() < 1e-12);
    let scalar = v["scalar"].as_f64().unwrap();
    let by_hand: f64 = vector.iter().enumerate().map(|(c, p)| c as f64 * p).sum();
    assert!((scalar - by_hand).abs() < 1e-12);
    assert!(scalar > 0.0);

    let out = bin()
        .args([
            "scm",
            "cace",
            "--scm",
            "builtin:toy",
            "--model",
            "builtin:toy",
            "--iv",
            "Taste-good",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("CONCEPT:SOURCE->TARGET"));
}

const AUDIT_ONLY: &str = r#"
seed = 1
encoder_scope = "shared"

[data]
scm = "builtin:desk"
model = "builtin:desk"
n_units = 100

[data.splits]
train = 0.4
match = 0.3
dev = 0.1
test = 0.2

[labels]
source = "zero_shot_oracle"

[predictors]
lr = 0.5
epochs = 10

[train_provider]
sigma = 0.1

[quads]
max_cfs = 1
miscf_count = 1
filter = true
effect = "total"
ivs_per_anchor = 1

[encoder]
tau = 0.1
epochs = 1
lr = 0.01
component_mask = [true, true, true, true, true, true]
hidden = [8]
embed_dim = 4
batch_size = 8

[eval]
strategies = ["causal"]
k_list = [1]
metrics = ["l2"]
generative_sigma = 0.1
gold_in_pool = false
sweep_rank_max = 2
sweep_topk = [1, 2]
min_candidates = 2

[audit]
enabled = true
scm = "builtin:toy"
model = "builtin:toy"
interventions = [
    { treatment = "Taste", source = "bad", target = "good" },
    { treatment = "Price", source = "low", target = "high" },
]
n = 200
draws = 5
"#;

#[test]
fn run_then_validate_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("audit.toml");
    std::fs::write(&config, AUDIT_ONLY).unwrap();
    let out_dir = dir.path().join("out");
    let out = bin()
        .arg("--out-dir")
        .arg(&out_dir)
        .arg("run")
        .arg(&config)
        .args(["--only", "audit"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("audit.json").exists());

    let out = bin().arg("validate").arg(&out_dir).output().unwrap();
    assert!(out.status.success());
    std::fs::write(out_dir.join("audit.json"), "[]").unwrap();
    let out = bin().arg("validate").arg(&out_dir).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("audit.json"));

    std::fs::write(
        &config,
        AUDIT_ONLY.replace("seed = 1", "seed = 1\nsurprise = true"),
    )
    .unwrap();
    let out = bin()
        .arg("--out-dir")
        .arg(&out_dir)
        .arg("run")
        .arg(&config)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("surprise"));
}
