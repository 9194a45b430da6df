//! Smoke tests of the `xsyn` binary.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use xsyn::fixtures::{three_image_corpus, CorpusPaths};
use xsyn::Tensor;

fn xsyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xsyn")).args(args).env_remove("XSYN_BACKEND").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(dir: &Path) -> CorpusPaths {
    three_image_corpus().write(dir.join("fx")).unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn usage_errors_are_json_on_stderr() {
    let o = xsyn(&["gen", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "usage");

    let o = xsyn(&["gen", "--annotations", "/nonexistent.json", "--images", "/x", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "runtime");

    assert!(xsyn(&["--help"]).status.success());
}

#[test]
fn groups_writes_a_loadable_table() {
    let dir = tempfile::tempdir().unwrap();
    let p = fixture(dir.path());
    let out = dir.path().join("groups.json");
    let o = xsyn(&["groups", "--annotations", s(&p.annotations), "--boundaries", "5000", "20000", "--out", s(&out)]);
    assert!(o.status.success());
    let table = xsyn::dataset::ClassGroupTable::load(&out).unwrap();
    assert_eq!(table.boundaries, (5000.0, 20000.0));
    assert_eq!(table.groups[2], vec!["Hammer"]);
}

#[test]
fn gen_with_groups_record_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let p = fixture(dir.path());
    let groups = dir.path().join("groups.json");
    assert!(xsyn(&["groups", "--annotations", s(&p.annotations), "--out", s(&groups)]).status.success());
    let transcript = dir.path().join("t.jsonl");
    let common = |out: &Path| -> Vec<String> {
        [
            "gen",
            "--mode",
            "add",
            "--seed",
            "3",
            "--steps",
            "6",
            "--size",
            "256",
            "--annotations",
            s(&p.annotations),
            "--images",
            s(&p.images),
            "--groups",
            s(&groups),
            "--out",
            s(out),
        ]
        .map(String::from)
        .to_vec()
    };
    let a = dir.path().join("a");
    let mut args = common(&a);
    args.extend(["--scenes", s(&p.scenes), "--record", s(&transcript)].map(String::from));
    let first = stdout_json(&xsyn(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    assert_eq!(first["generated"], 3);

    let b = dir.path().join("b");
    let mut args = common(&b);
    args.extend(["--replay", s(&transcript)].map(String::from));
    let second = stdout_json(&xsyn(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    assert_eq!(std::fs::read(a.join("annotations.json")).unwrap(), std::fs::read(b.join("annotations.json")).unwrap());
    assert_ne!(first["manifest_sha256"], serde_json::Value::Null);
    // Only the backend label differs between the two manifests.
    let ma: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value = serde_json::from_slice(&std::fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["entries"], mb["entries"]);
    assert_eq!(second["generated"], 3);
}

#[test]
fn refine_and_inspect_work_on_debug_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let p = fixture(dir.path());
    let out = dir.path().join("out");
    let o = xsyn(&[
        "gen",
        "--seed",
        "7",
        "--steps",
        "8",
        "--size",
        "256",
        "--debug",
        "--annotations",
        s(&p.annotations),
        "--images",
        s(&p.images),
        "--scenes",
        s(&p.scenes),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let entity = &manifest["entries"][0]["entities"][0];
    let g: Vec<String> = entity["grounding_box"].as_array().unwrap().iter().map(|v| v.to_string()).collect();

    // Refine the first entity from the decoded original (z0) and its attention map.
    let z0 = Tensor::load_xten(out.join("debug/bag-001.z0.xten")).unwrap();
    let decoded = xsyn::backends::MockAutoencoder::new(8);
    let image = xsyn::backends::AutoencoderBackend::decode(&decoded, &z0).unwrap();
    let image_path = dir.path().join("original.xten");
    image.save_xten(&image_path).unwrap();
    let att = out.join("debug/bag-001.attention0.xten");
    let mut args = vec!["refine", "--image", s(&image_path), "--attention", s(&att), "--box"];
    args.extend(g.iter().map(String::as_str));
    let v = stdout_json(&xsyn(&args));
    assert_eq!(v["box"], entity["refined_box"]);
    assert_eq!(v["prompt"]["points"], entity["points"]);

    let grids = dir.path().join("grids");
    let o = xsyn(&["inspect", s(&att), s(&out.join("debug/bag-001.z0.xten")), "--out", s(&grids)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let latent_grid = xsyn::imageio::load_png(grids.join("bag-001.z0.png")).unwrap();
    assert_eq!(latent_grid.dims(), &[32, 128, 3]);
    assert!(grids.join("bag-001.attention0.png").exists());
}

#[test]
fn serve_mock_answers_gen_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let p = fixture(dir.path());
    let mut server = Command::new(env!("CARGO_BIN_EXE_xsyn"))
        .args(["serve-mock", "--listen", "127.0.0.1:0", "--scenes", s(&p.scenes)])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    let endpoint = v["listening"].as_str().unwrap().to_string();

    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "gen",
            "--seed",
            "5",
            "--steps",
            "6",
            "--size",
            "256",
            "--annotations",
            s(&p.annotations),
            "--images",
            s(&p.images),
            "--out",
            s(out),
        ];
        args.extend_from_slice(extra);
        stdout_json(&xsyn(&args))
    };
    let local = dir.path().join("local");
    let remote = dir.path().join("remote");
    run(&local, &["--scenes", s(&p.scenes)]);
    run(&remote, &["--backend", &endpoint]);
    // The endpoint can also come from the environment.
    let env_out = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_xsyn"))
        .args(["gen", "--seed", "5", "--steps", "6", "--size", "256", "--annotations", s(&p.annotations)])
        .args(["--images", s(&p.images), "--out", s(&env_out)])
        .env("XSYN_BACKEND", &endpoint)
        .output()
        .unwrap();
    server.kill().unwrap();
    server.wait().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    for out in [&remote, &env_out] {
        assert_eq!(
            std::fs::read(local.join("annotations.json")).unwrap(),
            std::fs::read(out.join("annotations.json")).unwrap()
        );
        for id in ["bag-001", "bag-002", "bag-003"] {
            let f = format!("images/{id}.png");
            assert_eq!(std::fs::read(local.join(&f)).unwrap(), std::fs::read(out.join(&f)).unwrap());
        }
    }
}
