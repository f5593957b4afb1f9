use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mpsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The single result directory under `base`.
fn result_dir(base: &Path) -> PathBuf {
    let dirs: Vec<_> = fs::read_dir(base).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn help_lists_every_verb() {
    let o = mpsim(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for verb in ["run", "matrix", "apc-sweep", "cv-sweep", "stability", "validate"] {
        assert!(text.contains(verb), "{verb} missing from help");
    }
    let run = stdout(&mpsim(&["run", "--help"]));
    for flag in [
        "--seeds",
        "--workers",
        "--output-dir",
        "--verbose",
        "--full",
        "--config",
    ] {
        assert!(run.contains(flag), "{flag} missing from run help");
    }
}

#[test]
fn validate_prints_a_config_that_validates_again() {
    let o = mpsim(&["validate", "--seeds", "1-3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("scenario.toml");
    fs::write(&path, stdout(&o)).unwrap();
    let again = mpsim(&["validate", "--config", path.to_str().unwrap()]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert!(stdout(&again).contains("seeds = [1, 2, 3]"));
}

#[test]
fn config_errors_exit_with_status_two_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\n[sensing]\ncv_penetration = 1.5\n").unwrap();
    let o = mpsim(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sensing.cv_penetration"), "{}", stderr(&o));

    let unknown = tmp.path().join("unknown.toml");
    fs::write(&unknown, "colour = 3\n").unwrap();
    let o = mpsim(&["validate", "--config", unknown.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));

    let missing = tmp.path().join("missing.toml");
    assert_eq!(
        mpsim(&["validate", "--config", missing.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );

    let out = tmp.path().to_str().unwrap();
    let o = mpsim(&["cv-sweep", "--seeds", "1-2", "--penetrations", "0.5,1.5", "-o", out]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(mpsim(&["matrix", "--rows", "9", "-o", out]).status.code(), Some(2));
    assert_eq!(
        mpsim(&["stability", "--horizon-steps", "100", "-o", out]).status.code(),
        Some(2)
    );
    assert_eq!(mpsim(&["run", "--seeds", "1,1", "-o", out]).status.code(), Some(2));
}

#[test]
fn run_writes_tables_and_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = tmp.path().join("scenario.toml");
    let text = stdout(&mpsim(&["validate", "--seeds", "1-3"]));
    fs::write(&scenario, &text).unwrap();

    let mut outputs = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "3")] {
        let base = tmp.path().join(name);
        let o = mpsim(&[
            "run",
            "--config",
            scenario.to_str().unwrap(),
            "--sub-scenario",
            "1",
            "--workers",
            workers,
            "--verbose",
            "-o",
            base.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let dir = result_dir(&base);
        let manifest = fs::read_to_string(dir.join("manifest.json")).unwrap();
        assert!(manifest.contains("\"complete\": true"), "{manifest}");
        assert!(manifest.contains("\"runs\": 9"), "{manifest}");
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    fs::read(&p).unwrap(),
                )
            })
            .collect();
        files.sort();
        let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
        for want in [
            "runs.csv",
            "comparison.csv",
            "accumulation.csv",
            "occupancy_buckets.csv",
            "decisions.csv",
        ] {
            assert!(names.contains(&want), "{want} not in {names:?}");
        }
        let hash = dir
            .file_name()
            .unwrap()
            .to_string_lossy()
            .rsplit('-')
            .next()
            .unwrap()
            .to_string();
        for (name, bytes) in &files {
            if name.ends_with(".csv") {
                assert!(
                    String::from_utf8_lossy(bytes).contains(&hash),
                    "{name} lacks the config hash"
                );
            }
        }
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(
        fs::read_to_string(&scenario).unwrap(),
        text,
        "scenario file was modified"
    );
}

#[test]
fn distinct_configs_write_to_distinct_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for seeds in ["1-2", "3-4"] {
        let o = mpsim(&["run", "--seeds", seeds, "-o", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = mpsim(&["run", "--seeds", "1-2", "--scenario", "2", "-o", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 3);
}

#[test]
fn sweeps_and_stability_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let cases: [&[&str]; 3] = [
        &["cv-sweep", "--seeds", "1-2", "--penetrations", "0.5,1.0"],
        &["apc-sweep", "--seeds", "1-2", "--rows", "1", "--sigmas", "0,20"],
        &["stability", "--seeds", "1-2", "--horizon-steps", "5000"],
    ];
    for args in cases {
        let mut full = args.to_vec();
        full.extend(["-o", out]);
        let o = mpsim(&full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        assert!(stdout(&o).contains(args[0]));
    }
    let names: Vec<String> = fs::read_dir(tmp.path())
        .unwrap()
        .flat_map(|d| fs::read_dir(d.unwrap().path()).unwrap())
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for want in ["cv_sweep.csv", "apc_sweep.csv", "stability.csv"] {
        assert!(names.iter().any(|n| n == want), "{want} not in {names:?}");
    }
}
