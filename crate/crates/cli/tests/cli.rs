use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ser_core::features::{read_embeddings, write_embeddings};
use ser_core::labels::{EmotionClass, NUM_CLASSES};
use ser_core::manifest::{read_predictions, write_predictions, Manifest, PredictionRecord};
use ser_core::metrics::MetricsReport;

fn ser(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ser")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const FIXTURE: &str = "\
sample_id,annotator_id,primary,secondary,arousal,valence,dominance
utt1,a1,happy,surprise;happy,5,6,4
utt1,a2,happy,,4,7,4
utt1,a3,neutral,happy,4,5,3
utt2,a1,fear,,2,1,2
utt2,a4,sad,fear,,,
";

#[test]
fn build_labels_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ann.csv");
    fs::write(&csv, FIXTURE).unwrap();
    let out = dir.path().join("m.jsonl");
    let o = ser(&["build-labels", p(&csv), "--split", "dev", "--embedding-dir", "emb", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 2);
    let m = Manifest::read(&out).unwrap();
    let u1 = &m.entries[0];
    assert_eq!(u1.sample_id, "utt1");
    assert!((u1.probs[EmotionClass::Happy.index()] - 2.0 / 3.0).abs() < 1e-15);
    assert!((u1.probs[EmotionClass::Neutral.index()] - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(u1.consensus.name(), "happy");
    assert_eq!(u1.n_annotations, 3);
    assert_eq!(u1.embedding_path.as_deref(), Some("emb/utt1.semb"));
    // arousal (5+4+4)/3 = 13/3 → (13/3 - 1)/6
    let attrs = u1.attributes.unwrap();
    assert!((attrs[0] - (13.0 / 3.0 - 1.0) / 6.0).abs() < 1e-12);
    let u2 = &m.entries[1];
    assert_eq!(u2.consensus.name(), "no_agreement");
    // only a1 scored utt2: (2, 1, 2) on the 1..7 scale
    let attrs = u2.attributes.unwrap();
    assert!((attrs[0] - 1.0 / 6.0).abs() < 1e-12 && attrs[1].abs() < 1e-12);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("2 samples from 5 annotations"));

    // rerun: identical bytes
    let out2 = dir.path().join("m2.jsonl");
    assert!(ser(&["build-labels", p(&csv), "--split", "dev", "--embedding-dir", "emb", "--out", p(&out2)]).status.success());
    assert_eq!(fs::read(&out).unwrap(), fs::read(&out2).unwrap());
    assert!(dir.path().join("m.jsonl.run.json").exists());
}

#[test]
fn build_labels_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ann.csv");
    fs::write(&csv, FIXTURE.lines().next().unwrap()).unwrap();
    let o = ser(&["build-labels", p(&csv), "--out", p(&dir.path().join("m.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no annotations"));

    fs::write(&csv, format!("{FIXTURE}utt3,a1,bored,,,,\n")).unwrap();
    let o = ser(&["build-labels", p(&csv), "--out", p(&dir.path().join("m.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 7"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(ser(&[]).status.code(), Some(1));
    assert_eq!(ser(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(ser(&["evaluate", "a", "b"]).status.code(), Some(1), "missing --out");
    assert_eq!(ser(&["--help"]).status.code(), Some(0));
    assert_eq!(ser(&["--version"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let o = ser(&["build-labels", "x.csv", "--split", "holdout", "--out", p(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(1));
}

fn synth(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let mut args = vec!["--seed", "3", "synth", "--dim", "6", "--train-majority", "12", "--dev-per-class", "3"];
    if !extra.contains(&"--train-minority") {
        args.extend_from_slice(&["--train-minority", "4"]);
    }
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", p(dir)]);
    let o = ser(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("manifest.jsonl")
}

const SMALL: &[&str] = &["--epochs", "2", "--batch-size", "8", "--conv-channels", "8", "--mlp-hidden", "8"];

#[test]
fn train_evaluate_ensemble_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), &[]);
    let run = dir.path().join("run");
    let mut args = vec!["--seed", "1", "train", p(&manifest)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out", p(&run)]);
    let o = ser(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.sckp", "train_report.json", "run_manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let eval = dir.path().join("eval");
    let ckpt = run.join("checkpoint.sckp");
    let o = ser(&["evaluate", p(&ckpt), p(&manifest), "--split", "dev", "--confusion-csv", "--out", p(&eval)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let own: MetricsReport = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert!(fs::read_to_string(eval.join("confusion.csv")).unwrap().starts_with("gold\\pred,"));
    let preds = eval.join("predictions.jsonl");

    // N = 1 and a file with itself reproduce the system's own metrics
    for files in [vec![p(&preds)], vec![p(&preds), p(&preds)]] {
        let out = dir.path().join(format!("ens{}.json", files.len()));
        let mut args = vec!["ensemble"];
        args.extend(files.iter().copied());
        args.extend_from_slice(&["--manifest", p(&manifest), "--out", p(&out)]);
        let o = ser(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let r: MetricsReport = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(r, own);
    }

    // same command twice: identical primary outputs
    let eval2 = dir.path().join("eval2");
    assert!(ser(&["evaluate", p(&ckpt), p(&manifest), "--split", "dev", "--out", p(&eval2)]).status.success());
    assert_eq!(fs::read(eval.join("metrics.json")).unwrap(), fs::read(eval2.join("metrics.json")).unwrap());
}

#[test]
fn ensemble_matches_hand_rolled_average() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), &[]);
    let m = Manifest::read(&manifest).unwrap();
    let ids: Vec<String> = m.entries.iter().map(|e| e.sample_id.clone()).collect();
    // three systems with seeded disagreement
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 + 0.01
    };
    let mut files = Vec::new();
    let mut systems = Vec::new();
    for s in 0..3 {
        let recs: Vec<PredictionRecord> = ids
            .iter()
            .map(|id| {
                let mut probs = [0.0; NUM_CLASSES];
                for x in probs.iter_mut() {
                    *x = next();
                }
                let z: f64 = probs.iter().sum();
                PredictionRecord { sample_id: id.clone(), probs: probs.map(|x| x / z) }
            })
            .collect();
        let f = dir.path().join(format!("sys{s}.jsonl"));
        write_predictions(&f, &recs).unwrap();
        files.push(f);
        systems.push(recs);
    }
    let out = dir.path().join("ens.json");
    let avg = dir.path().join("avg.jsonl");
    let o = ser(&[
        "ensemble", p(&files[0]), p(&files[1]), p(&files[2]),
        "--manifest", p(&manifest), "--predictions-out", p(&avg), "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got = read_predictions(&avg).unwrap();
    assert_eq!(got.len(), ids.len());
    for (k, r) in got.iter().enumerate() {
        assert_eq!(r.sample_id, ids[k]);
        for c in 0..NUM_CLASSES {
            let want = (systems[0][k].probs[c] + systems[1][k].probs[c] + systems[2][k].probs[c]) / 3.0;
            assert!((r.probs[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn ensemble_rejects_mismatched_ids() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), &[]);
    let m = Manifest::read(&manifest).unwrap();
    let rec = |id: &str| PredictionRecord { sample_id: id.into(), probs: [1.0 / 9.0; NUM_CLASSES] };
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    write_predictions(&a, &[rec(&m.entries[0].sample_id), rec(&m.entries[1].sample_id)]).unwrap();
    write_predictions(&b, &[rec(&m.entries[0].sample_id), rec(&m.entries[2].sample_id)]).unwrap();
    let o = ser(&["ensemble", p(&a), p(&b), "--manifest", p(&manifest), "--out", p(&dir.path().join("r.json"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains(&m.entries[1].sample_id) && err.contains(&m.entries[2].sample_id), "{err}");
}

#[test]
fn augment_rules() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), &["--train-minority", "0"]);
    // add exactly one minority sample by relabeling a majority one
    let mut m = Manifest::read(&manifest).unwrap();
    let i = m.entries.iter().position(|e| e.split == ser_core::labels::Split::Train).unwrap();
    m.entries[i].set_label(ser_core::labels::SoftLabel::one_hot(EmotionClass::Fear, 5));
    m.write(&manifest).unwrap();

    let run = |extra: &[&str], out: &Path| {
        let mut args = vec!["--seed", "5", "augment", p(&manifest), "--mode", "embedding"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", p(out)]);
        let o = ser(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        Manifest::read(out.join("manifest.jsonl")).unwrap()
    };
    let off = run(&["--p-mix", "0", "--dropout-rate", "0"], &dir.path().join("off"));
    assert_eq!(off.entries.len(), m.entries.len());
    for (a, b) in off.entries.iter().zip(&m.entries) {
        assert_eq!((&a.sample_id, a.probs, a.consensus), (&b.sample_id, b.probs, b.consensus));
        assert!(a.mix.is_none());
    }

    let all = run(&["--p-mix", "1"], &dir.path().join("all"));
    for e in all.entries.iter().filter(|e| e.split == ser_core::labels::Split::Train) {
        if e.sample_id == m.entries[i].sample_id {
            assert!(e.mix.is_none());
        } else {
            let plan = e.mix.as_ref().expect("every majority entry is mixed");
            assert!(e.sample_id.ends_with(&format!("+{}", m.entries[i].sample_id)));
            let emb = read_embeddings(e.embedding_path.as_ref().unwrap()).unwrap();
            assert!(emb.n_frames > 0);
            assert!(plan.first == m.entries[i].sample_id || plan.second == m.entries[i].sample_id);
        }
    }
    let again = run(&["--p-mix", "1"], &dir.path().join("again"));
    for (a, b) in all.entries.iter().zip(&again.entries) {
        assert_eq!((&a.sample_id, a.probs, &a.mix), (&b.sample_id, b.probs, &b.mix));
        if a.mix.is_some() {
            let (x, y) = (a.embedding_path.as_ref().unwrap(), b.embedding_path.as_ref().unwrap());
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }
}

#[test]
fn waveform_augmentation_writes_audio() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), &["--with-audio"]);
    let out = dir.path().join("aug");
    let o = ser(&["--seed", "2", "augment", p(&manifest), "--mode", "waveform", "--p-mix", "1", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = Manifest::read(out.join("manifest.jsonl")).unwrap();
    let mixed: Vec<_> = m.entries.iter().filter(|e| e.mix.is_some()).collect();
    assert!(!mixed.is_empty());
    for e in mixed {
        assert!(e.embedding_path.is_none());
        assert!(Path::new(e.audio_path.as_ref().unwrap()).exists());
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), &[]);
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, "epochs = 4\nbatch_size = 8\nseed = 9\n\n[model]\nconv_channels = 8\nmlp_hidden = 8\n\n[augmentation]\np_mix = 0.5\n").unwrap();
    let run = dir.path().join("run");
    let o = ser(&["--config", p(&cfg), "train", p(&manifest), "--epochs", "1", "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rm: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(rm["config"]["epochs"], 1);
    assert_eq!(rm["config"]["seed"], 9);
    assert_eq!(rm["config"]["augmentation"]["p_mix"], 0.5);
    assert_eq!(rm["config"]["model"]["conv_channels"], 8);

    fs::write(&cfg, "epochs = 2\nunknown_key = 1\n").unwrap();
    let o = ser(&["--config", p(&cfg), "train", p(&manifest), "--out", p(&run)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_and_numeric_failures() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), &[]);

    let bad_ckpt = dir.path().join("bad.sckp");
    fs::write(&bad_ckpt, b"NOPE0000").unwrap();
    let o = ser(&["evaluate", p(&bad_ckpt), p(&manifest), "--out", p(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2));

    let m = Manifest::read(&manifest).unwrap();
    let path = m.resolve(m.entries[0].embedding_path.as_ref().unwrap());
    let mut e = read_embeddings(&path).unwrap();
    e.data.fill(f32::NAN);
    write_embeddings(&path, &e).unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", p(&manifest)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out", p(&run)]);
    let o = ser(&args);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss at epoch 1"));

    fs::remove_file(&path).unwrap();
    let o = ser(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&m.entries[0].sample_id));
}
