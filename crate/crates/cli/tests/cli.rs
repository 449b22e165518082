use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmner_core::load_dataset;
use gmner_core::schema::{generations_from_gold, write_generations, Generation};
use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn gmner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmner"))
        .args(args)
        .output()
        .expect("spawn gmner")
}

fn ok(args: &[&str]) -> String {
    let out = gmner(args);
    assert!(
        out.status.success(),
        "gmner {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    gmner(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn self_score_is_perfect() {
    let dir = TempDir::new().unwrap();
    let gold = fixture("gold.jsonl");
    let gens = dir.path().join("gens.jsonl");
    write_generations(
        &generations_from_gold(&load_dataset(&gold).unwrap()).unwrap(),
        &gens,
    )
    .unwrap();
    let report = dir.path().join("r.json");
    ok(&[
        "score",
        "--gold",
        s(&gold),
        "--generations",
        s(&gens),
        "--out",
        s(&report),
    ]);
    let m = &read_json(&report)["metrics"];
    for task in ["mner", "eeg", "gmner"] {
        for k in ["precision", "recall", "f1"] {
            assert_eq!(m[task][k].as_f64(), Some(1.0), "{task}.{k}");
        }
    }
    assert_eq!(m["acc_at"]["0.5"].as_f64(), Some(1.0));
    assert_eq!(m["acc_at"]["0.75"].as_f64(), Some(1.0));
    assert_eq!(m["mean_iou"].as_f64(), Some(1.0));
}

// One fault per failure mode: wrong type, box on a boxless gold, far box,
// wrong span, spurious record, duplicate, malformed line, unknown id.
#[test]
fn error_corpus_matches_golden_metrics() {
    let dir = TempDir::new().unwrap();
    let golden = read_json(&fixture("golden_metrics.json"));
    for extra in [&[][..], &["--oracle"][..]] {
        let report = dir.path().join("r.json");
        let (gold, gens, types) = (
            fixture("gold.jsonl"),
            fixture("generations_errors.jsonl"),
            fixture("types.txt"),
        );
        let mut args = vec![
            "score",
            "--gold",
            s(&gold),
            "--generations",
            s(&gens),
            "--types",
            s(&types),
            "--out",
            s(&report),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        let r = read_json(&report);
        assert_eq!(r["metrics"], golden, "{extra:?}");
        assert_eq!(r["generations"]["malformed_lines"], 1);
        assert_eq!(r["generations"]["unknown_ids"], serde_json::json!(["zz"]));
        assert_eq!(r["generations"]["unknown_types"], serde_json::json!([]));
    }
}

#[test]
fn score_json_has_fixed_precision() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("r.json");
    ok(&[
        "score",
        "--gold",
        s(&fixture("gold.jsonl")),
        "--generations",
        s(&fixture("generations_errors.jsonl")),
        "--out",
        s(&report),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"f1\": 0.5455"), "{text}");
    assert!(text.contains("\"mean_iou\": 0.7500"), "{text}");
}

#[test]
fn empty_generations_score_zero() {
    let dir = TempDir::new().unwrap();
    let gens = dir.path().join("empty.jsonl");
    fs::write(&gens, "").unwrap();
    let report = dir.path().join("r.json");
    let stdout = ok(&[
        "score",
        "--gold",
        s(&fixture("gold.jsonl")),
        "--generations",
        s(&gens),
        "--out",
        s(&report),
    ]);
    assert!(stdout.contains("GMNER"));
    let r = read_json(&report);
    assert_eq!(r["metrics"]["gmner"]["f1"].as_f64(), Some(0.0));
    assert_eq!(r["metrics"]["gmner"]["n_pred"], 0);
    assert_eq!(r["metrics"]["gmner"]["n_gold"], 11);
    assert_eq!(r["generations"]["missing_ids"].as_array().unwrap().len(), 6);
}

#[test]
fn config_thresholds_and_flag_override() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("gmner.toml");
    fs::write(&cfg, "[scoring]\nthresholds = [0.9]\n").unwrap();
    let report = dir.path().join("r.json");
    let (gold, gens) = (fixture("gold.jsonl"), fixture("generations_errors.jsonl"));
    let base = [
        "score",
        "--gold",
        s(&gold),
        "--generations",
        s(&gens),
        "--out",
        s(&report),
        "--config",
        s(&cfg),
    ];
    ok(&base);
    let keys: Vec<String> = read_json(&report)["metrics"]["acc_at"]
        .as_object()
        .unwrap()
        .keys()
        .cloned()
        .collect();
    assert_eq!(keys, ["0.9"]);

    let mut args = base.to_vec();
    args.extend(["--thresholds", "0.25,0.5"]);
    ok(&args);
    let acc = &read_json(&report)["metrics"]["acc_at"];
    assert!(acc.get("0.25").is_some() && acc.get("0.5").is_some());
}

#[test]
fn perturb_zero_noise_is_identity() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("p.jsonl");
    let gold = fixture("gold.jsonl");
    ok(&[
        "perturb",
        "--dataset",
        s(&gold),
        "--out",
        s(&out),
        "--beta",
        "0",
        "--gamma",
        "0",
    ]);
    assert_eq!(load_dataset(&out).unwrap(), load_dataset(&gold).unwrap());
    let manifest = read_json(&dir.path().join("p.jsonl.manifest.json"));
    assert_eq!(manifest["stats"]["boxes"], 8);
    assert_eq!(manifest["grbp"]["beta"].as_f64(), Some(0.0));
}

#[test]
fn perturb_output_independent_of_workers() {
    let dir = TempDir::new().unwrap();
    let gold = fixture("gold.jsonl");
    let mut files = Vec::new();
    for workers in ["1", "8"] {
        let out = dir.path().join(format!("p{workers}.jsonl"));
        ok(&[
            "perturb",
            "--dataset",
            s(&gold),
            "--out",
            s(&out),
            "--seed",
            "11",
            "--workers",
            workers,
        ]);
        files.push(fs::read(&out).unwrap());
        files.push(fs::read(dir.path().join(format!("p{workers}.jsonl.manifest.json"))).unwrap());
    }
    assert_eq!(files[0], files[2]);
    assert_eq!(files[1], files[3]);
    assert_ne!(files[0], fs::read(&gold).unwrap());
}

#[test]
fn seed_comes_from_config_unless_flagged() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("gmner.toml");
    fs::write(&cfg, "[grbp]\nseed = 99\ntau = 0.6\n").unwrap();
    let out = dir.path().join("p.jsonl");
    let gold = fixture("gold.jsonl");
    let manifest = dir.path().join("p.jsonl.manifest.json");
    ok(&[
        "perturb",
        "--dataset",
        s(&gold),
        "--out",
        s(&out),
        "--config",
        s(&cfg),
    ]);
    let m = read_json(&manifest);
    assert_eq!(
        (m["base_seed"].as_u64(), m["grbp"]["tau"].as_f64()),
        (Some(99), Some(0.6))
    );
    ok(&[
        "perturb",
        "--dataset",
        s(&gold),
        "--out",
        s(&out),
        "--config",
        s(&cfg),
        "--seed",
        "5",
        "--tau",
        "0.8",
    ]);
    let m = read_json(&manifest);
    assert_eq!(
        (m["base_seed"].as_u64(), m["grbp"]["tau"].as_f64()),
        (Some(5), Some(0.8))
    );
}

#[test]
fn build_train_then_validate() {
    let dir = TempDir::new().unwrap();
    let gold = fixture("gold.jsonl");
    let train = dir.path().join("train.jsonl");
    let stdout = ok(&[
        "build-train",
        "--dataset",
        s(&gold),
        "--inline-reasoning",
        "--out",
        s(&train),
    ]);
    assert!(stdout.contains("emitted 6 of 6"), "{stdout}");
    let stdout = ok(&[
        "validate-train",
        "--train",
        s(&train),
        "--gold",
        s(&gold),
        "--strict",
    ]);
    assert!(
        stdout.contains("0 malformed lines, 0 guard violations"),
        "{stdout}"
    );

    let first: Value =
        serde_json::from_str(fs::read_to_string(&train).unwrap().lines().next().unwrap()).unwrap();
    let target = first["target"].as_str().unwrap();
    assert!(target.starts_with("The tweet names"));
    assert!(target.ends_with("Warriors | ORG | None"));
    assert!(first["instruction"]
        .as_str()
        .unwrap()
        .contains("Kevin Durant joins the Warriors"));
}

#[test]
fn build_train_no_cot_and_traces() {
    let dir = TempDir::new().unwrap();
    let gold = fixture("gold.jsonl");
    let train = dir.path().join("train.jsonl");
    ok(&[
        "build-train",
        "--dataset",
        s(&gold),
        "--no-cot",
        "--beta",
        "0",
        "--gamma",
        "0",
        "--out",
        s(&train),
    ]);
    let first: Value =
        serde_json::from_str(fs::read_to_string(&train).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(
        first["target"],
        "Kevin Durant | PER | [120, 40, 300, 420]\nWarriors | ORG | None"
    );

    let traces = dir.path().join("traces.jsonl");
    fs::write(
        &traces,
        concat!(
            "{\"id\":\"e1\",\"reasoning\":\"A player.\"}\n",
            "{\"id\":\"e2\",\"reasoning\":\"Lake | LOC | None\"}\n",
        ),
    )
    .unwrap();
    let stdout = ok(&[
        "build-train",
        "--dataset",
        s(&gold),
        "--traces",
        s(&traces),
        "--out",
        s(&train),
    ]);
    assert!(
        stdout.contains("emitted 1 of 6 examples (4 missing reasoning, 1 rejected reasoning)"),
        "{stdout}"
    );
    let m = read_json(&dir.path().join("train.jsonl.manifest.json"));
    assert_eq!(m["cot"], true);
    assert_eq!(m["counts"]["emitted"], 1);
}

#[test]
fn validate_train_flags_corruption() {
    let dir = TempDir::new().unwrap();
    let gold = fixture("gold.jsonl");
    let train = dir.path().join("train.jsonl");
    ok(&[
        "build-train",
        "--dataset",
        s(&gold),
        "--no-cot",
        "--out",
        s(&train),
    ]);
    let text = fs::read_to_string(&train).unwrap();
    let corrupted = text.replacen(
        "Kevin Durant | PER | [",
        "Kevin Durant | PER | [600, 0, 640, 10] | x [",
        1,
    );
    assert_ne!(text, corrupted);
    fs::write(&train, corrupted).unwrap();
    assert_eq!(
        code(&["validate-train", "--train", s(&train), "--gold", s(&gold)]),
        0
    );
    assert_eq!(
        code(&[
            "validate-train",
            "--train",
            s(&train),
            "--gold",
            s(&gold),
            "--strict"
        ]),
        4
    );
}

#[test]
fn sweep_writes_csv() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("s.csv");
    ok(&[
        "sweep",
        "--betas",
        "0,0.05",
        "--taus",
        "0,0.7",
        "--n-samples",
        "500",
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "beta,gamma,tau,n_samples,mean_iou,mean_iou_accepted,acceptance_rate,fallback_rate,small_box_rate,acc_at_0.5"
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][4], 1.0);
    assert!(rows[2][4] < 1.0);

    let from_data = dir.path().join("d.csv");
    ok(&[
        "sweep",
        "--betas",
        "0.03",
        "--n-samples",
        "100",
        "--dataset",
        s(&fixture("gold.jsonl")),
        "--out",
        s(&from_data),
    ]);
    assert_eq!(fs::read_to_string(&from_data).unwrap().lines().count(), 2);
}

#[test]
fn parse_reports_injected_faults() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("parsed.jsonl");
    let stdout = ok(&[
        "parse",
        "--generations",
        s(&fixture("generations_errors.jsonl")),
        "--out",
        s(&out),
    ]);
    assert!(
        stdout.contains("7 generations, 13 records, 1 malformed lines"),
        "{stdout}"
    );
    let parsed: Vec<Value> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(parsed[0]["reasoning"], "The photo shows the player.");
    assert_eq!(parsed[5]["malformed_lines"][0]["line_no"], 3);
}

#[test]
fn parse_normalized_frame_uses_gold_dims() {
    let dir = TempDir::new().unwrap();
    let gens = dir.path().join("g.jsonl");
    fs::write(
        &gens,
        "{\"id\":\"e1\",\"output\":\"Kevin Durant | PER | [500, 500, 1000, 1000]\"}\n",
    )
    .unwrap();
    let out = dir.path().join("parsed.jsonl");
    assert_eq!(
        code(&[
            "parse",
            "--generations",
            s(&gens),
            "--out",
            s(&out),
            "--frame",
            "normalized-1000"
        ]),
        2
    );
    ok(&[
        "parse",
        "--generations",
        s(&gens),
        "--out",
        s(&out),
        "--frame",
        "normalized-1000",
        "--gold",
        s(&fixture("gold.jsonl")),
    ]);
    let v: Value = serde_json::from_str(fs::read_to_string(&out).unwrap().trim()).unwrap();
    assert_eq!(
        v["records"][0]["box"],
        serde_json::json!([320.0, 240.0, 640.0, 480.0])
    );
}

fn random_string(state: &mut u64) -> String {
    const PIECES: &[&str] = &[
        "|",
        " | ",
        "[",
        "]",
        ",",
        " ",
        "\n",
        "None",
        "null",
        "PER",
        "-3",
        "12",
        "4.5",
        "1e9",
        "NaN",
        "é",
        "漢",
        "\t",
        "\"",
        "\\",
        "abc",
        "inf",
        "[1, 2, 3, 4]",
    ];
    let mut next = || {
        *state ^= *state << 13;
        *state ^= *state >> 7;
        *state ^= *state << 17;
        *state
    };
    let n = (next() % 40) as usize;
    (0..n)
        .map(|_| PIECES[(next() % PIECES.len() as u64) as usize])
        .collect()
}

#[test]
fn parse_survives_random_generations() {
    let dir = TempDir::new().unwrap();
    let gens = dir.path().join("fuzz.jsonl");
    let mut state = 0x9e37_79b9_7f4a_7c15;
    let data: Vec<Generation> = (0..10_000)
        .map(|i| Generation {
            id: format!("f{i}"),
            output: random_string(&mut state),
        })
        .collect();
    write_generations(&data, &gens).unwrap();
    let out = dir.path().join("parsed.jsonl");
    let stdout = ok(&["parse", "--generations", s(&gens), "--out", s(&out)]);
    assert!(stdout.starts_with("10000 generations"), "{stdout}");
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 10_000);
    let gold = dir.path().join("gold.jsonl");
    fs::write(&gold, "").unwrap();
    ok(&["score", "--gold", s(&gold), "--generations", s(&gens)]);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let gold = fixture("gold.jsonl");
    let out = dir.path().join("o.jsonl");
    assert_eq!(
        code(&["perturb", "--dataset", "/no/such/file", "--out", s(&out)]),
        3
    );
    assert_eq!(
        code(&[
            "perturb",
            "--dataset",
            s(&gold),
            "--out",
            "/no/such/dir/o.jsonl"
        ]),
        3
    );
    assert_eq!(
        code(&[
            "perturb",
            "--dataset",
            s(&gold),
            "--out",
            s(&out),
            "--tau",
            "1.5"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "perturb",
            "--dataset",
            s(&gold),
            "--out",
            s(&out),
            "--s-min",
            "1.1"
        ]),
        2
    );
    assert_eq!(
        code(&["build-train", "--dataset", s(&gold), "--out", s(&out)]),
        2
    );
    assert_eq!(
        code(&[
            "build-train",
            "--dataset",
            s(&gold),
            "--no-cot",
            "--inline-reasoning",
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(code(&["sweep", "--image-size", "640", "--out", s(&out)]), 2);
    assert_eq!(code(&["sweep", "--box-frac", "0.5:2", "--out", s(&out)]), 2);
    assert_eq!(code(&["sweep", "--betas", "-1", "--out", s(&out)]), 2);

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[grbp]\nbetta = 0.1\n").unwrap();
    assert_eq!(
        code(&[
            "perturb",
            "--dataset",
            s(&gold),
            "--out",
            s(&out),
            "--config",
            s(&cfg)
        ]),
        2
    );

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\":\"a\",\"text\":\"t\",\"image_path\":\"p\",\"image_width\":10,\"image_height\":10,\"entities\":[{\"span\":\"x\",\"type\":\"PER\",\"box\":[0,0,20,5]}]}\n").unwrap();
    let err = gmner(&["perturb", "--dataset", s(&bad), "--out", s(&out)]);
    assert_eq!(err.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&err.stderr).contains("line 1"));

    let dup = dir.path().join("dup.jsonl");
    fs::write(
        &dup,
        "{\"id\":\"e1\",\"output\":\"\"}\n{\"id\":\"e1\",\"output\":\"\"}\n",
    )
    .unwrap();
    assert_eq!(
        code(&["score", "--gold", s(&gold), "--generations", s(&dup)]),
        3
    );
    let gens = fixture("generations_errors.jsonl");
    assert_eq!(
        code(&[
            "score",
            "--gold",
            s(&gold),
            "--generations",
            s(&gens),
            "--thresholds",
            "1.5"
        ]),
        2
    );
}

fn thousand_box_dataset(path: &Path) {
    use gmner_core::{BBox, Example, ImageDims};
    let dims = ImageDims::new(640, 480).unwrap();
    let examples: Vec<Example> = (0..250u32)
        .map(|i| Example {
            id: format!("b{i}"),
            text: format!("post {i}"),
            image_ref: format!("img/b{i}.jpg"),
            dims,
            gold: (0..4u32)
                .map(|j| {
                    let (x, y) = (
                        f64::from((i * 37 + j * 101) % 500),
                        f64::from((i * 53 + j * 71) % 380),
                    );
                    let (w, h) = (
                        f64::from(8 + (i + j * 13) % 130),
                        f64::from(8 + (i * 7 + j) % 95),
                    );
                    let b = BBox::new(x, y, x + w, y + h).unwrap();
                    gmner_core::EntityRecord::new(&format!("E{j}"), "PER", Some(b)).unwrap()
                })
                .collect(),
            reasoning: None,
        })
        .collect();
    gmner_core::write_dataset(&examples, path).unwrap();
}

#[test]
fn perturb_thousand_boxes_respects_guard() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.jsonl");
    thousand_box_dataset(&input);
    let out = dir.path().join("out.jsonl");
    ok(&[
        "perturb",
        "--dataset",
        s(&input),
        "--out",
        s(&out),
        "--beta",
        "0.03",
        "--gamma",
        "0.03",
        "--seed",
        "3",
    ]);
    let (before, after) = (load_dataset(&input).unwrap(), load_dataset(&out).unwrap());
    let mut n = 0;
    for (a, b) in before.iter().zip(&after) {
        for (ra, rb) in a.gold.iter().zip(&b.gold) {
            let (x, y) = (ra.bbox.unwrap(), rb.bbox.unwrap());
            assert!(x == y || y.iou(&x) >= 0.7, "{} {x:?} -> {y:?}", a.id);
            n += 1;
        }
    }
    assert_eq!(n, 1000);
}

/// Fallback rate at beta = gamma = 0.03, tau = 0.7 over 100_000 uniform
/// boxes, seed 2024; allowed to drift by 0.02.
const FROZEN_DEFAULT_FALLBACK_RATE: f64 = 0.0;

#[test]
fn sweep_default_fallback_rate_is_frozen() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("s.csv");
    ok(&[
        "sweep",
        "--betas",
        "0.03",
        "--taus",
        "0.7",
        "--n-samples",
        "100000",
        "--seed",
        "2024",
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let fallback: f64 = row[7].parse().unwrap();
    assert!(
        (fallback - FROZEN_DEFAULT_FALLBACK_RATE).abs() <= 0.02,
        "fallback rate {fallback}"
    );
}

#[test]
fn parse_well_formed_fixture_is_clean() {
    let dir = TempDir::new().unwrap();
    let gens = dir.path().join("gens.jsonl");
    write_generations(
        &generations_from_gold(&load_dataset(fixture("gold.jsonl")).unwrap()).unwrap(),
        &gens,
    )
    .unwrap();
    let out = dir.path().join("parsed.jsonl");
    let stdout = ok(&["parse", "--generations", s(&gens), "--out", s(&out)]);
    assert!(
        stdout.contains("6 generations, 11 records, 0 malformed lines"),
        "{stdout}"
    );
}
