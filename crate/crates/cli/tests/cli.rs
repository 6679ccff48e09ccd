use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use compot::allocator::{AllocationPlan, PlanMode, Status};
use compot::artifact::{sidecar_path, Artifacts};
use compot::report::Report;
use compot::tensorio::{self, Tensor, TensorSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_compot"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn compot")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "compot {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

struct Model {
    dir: tempfile::TempDir,
}

impl Model {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

/// Three layers (two shapes), random weights and activations.
fn model() -> Model {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layers = [("blk.0.q_proj", 24, 32), ("blk.0.up_proj", 24, 40), ("blk.1.q_proj", 24, 32)];
    let mut weights = TensorSet::new();
    let mut acts = TensorSet::new();
    for (name, m, n) in layers {
        weights
            .insert(name, Tensor::from_f32(vec![m, n], &random(&mut rng, m * n)).unwrap())
            .unwrap();
        for c in 0..2 {
            acts.insert(
                format!("{name}/activations/{c}"),
                Tensor::from_f32(vec![40, m], &random(&mut rng, 40 * m)).unwrap(),
            )
            .unwrap();
        }
    }
    tensorio::write_container(dir.path().join("w.st"), &weights).unwrap();
    tensorio::write_container(dir.path().join("acts.st"), &acts).unwrap();
    let manifest = serde_json::json!({
        "layers": layers.iter().map(|(n, _, _)| serde_json::json!({"weight": n})).collect::<Vec<_>>(),
    });
    std::fs::write(dir.path().join("m.json"), manifest.to_string()).unwrap();
    Model { dir }
}

fn gram(m: &Model) -> PathBuf {
    let out = m.path("g.st");
    ok(&["gram", "--manifest", p(&m.path("m.json")), "--activations", p(&m.path("acts.st")), "--out", p(&out)]);
    out
}

fn allocate(m: &Model, extra: &[&str]) -> PathBuf {
    let out = m.path("plan.json");
    let mut args: Vec<String> = vec![
        "allocate".into(),
        "--manifest".into(),
        p(&m.path("m.json")).into(),
        "--weights".into(),
        p(&m.path("w.st")).into(),
        "--out".into(),
        p(&out).into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&args);
    out
}

fn compress(m: &Model, plan: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![
        "compress".into(),
        "--manifest".into(),
        p(&m.path("m.json")).into(),
        "--weights".into(),
        p(&m.path("w.st")).into(),
        "--plan".into(),
        p(plan).into(),
        "--out".into(),
        p(out).into(),
    ];
    let g = m.path("g.st");
    if g.exists() {
        args.extend(["--grams".to_string(), p(&g).to_string()]);
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&args)
}

#[test]
fn gram_identity_and_chunking() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = TensorSet::new();
    w.insert("a", Tensor::from_f32(vec![3, 2], &[1.0; 6]).unwrap()).unwrap();
    tensorio::write_container(dir.path().join("w.st"), &w).unwrap();
    let eye: Vec<f32> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    let mut acts = TensorSet::new();
    acts.insert("a/activations", Tensor::from_f32(vec![3, 3], &eye).unwrap()).unwrap();
    tensorio::write_container(dir.path().join("a.st"), &acts).unwrap();
    std::fs::write(dir.path().join("m.json"), r#"{"layers":[{"weight":"a"}]}"#).unwrap();
    let out = dir.path().join("g.st");
    let o = ok(&[
        "gram",
        "--manifest",
        p(&dir.path().join("m.json")),
        "--activations",
        p(&dir.path().join("a.st")),
        "--out",
        p(&out),
    ]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("N=3"));
    let g = tensorio::load_f64_matrix(&tensorio::read_container(&out).unwrap(), "a/gram").unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(g[(i, j)], if i == j { 1.0 } else { 0.0 });
        }
    }
    let first = std::fs::read(&out).unwrap();

    // the same rows split over two chunks
    let mut acts = TensorSet::new();
    acts.insert("a/activations/0", Tensor::from_f32(vec![1, 3], &eye[..3]).unwrap()).unwrap();
    acts.insert("a/activations/1", Tensor::from_f32(vec![2, 3], &eye[3..]).unwrap()).unwrap();
    tensorio::write_container(dir.path().join("a.st"), &acts).unwrap();
    ok(&[
        "gram",
        "--manifest",
        p(&dir.path().join("m.json")),
        "--activations",
        p(&dir.path().join("a.st")),
        "--out",
        p(&out),
    ]);
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn static_plan_assigns_uniform_ratio() {
    let m = model();
    let plan = allocate(&m, &["--static-cr", "0.2"]);
    let plan = AllocationPlan::from_json_slice(&std::fs::read(plan).unwrap()).unwrap();
    assert_eq!(plan.mode, PlanMode::Static);
    for e in &plan.matrices {
        assert_eq!(e.status, Status::Factorize);
        assert_eq!(e.cr, 0.2);
        assert!(e.k.is_some() && e.s.is_some());
    }
}

#[test]
fn grouping_is_irrelevant_for_identical_layers() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = random(&mut rng, 16 * 20);
    let mut w = TensorSet::new();
    let names = ["l0.q", "l0.k", "l1.q", "l1.k"];
    for n in names {
        w.insert(n, Tensor::from_f32(vec![16, 20], &base).unwrap()).unwrap();
    }
    tensorio::write_container(dir.path().join("w.st"), &w).unwrap();
    let layers: Vec<_> = names.iter().map(|n| serde_json::json!({"weight": n})).collect();
    std::fs::write(dir.path().join("m.json"), serde_json::json!({ "layers": layers }).to_string()).unwrap();
    let mut plans = Vec::new();
    for g in ["global", "per-projection-type"] {
        let out = dir.path().join(format!("{g}.json"));
        ok(&[
            "allocate",
            "--manifest",
            p(&dir.path().join("m.json")),
            "--weights",
            p(&dir.path().join("w.st")),
            // 0.55 leaves each matrix exactly r = 4, so no group gets a spare rank
            "--cr",
            "0.55",
            "--grouping",
            g,
            "--out",
            p(&out),
        ]);
        let plan = AllocationPlan::from_json_slice(&std::fs::read(out).unwrap()).unwrap();
        plans.push(plan.matrices.iter().map(|e| (e.r, e.k, e.s)).collect::<Vec<_>>());
    }
    assert_eq!(plans[0], plans[1]);
}

#[test]
fn exit_codes() {
    let m = model();
    let base = |extra: &[&str]| {
        let mut a = vec![
            "allocate".to_string(),
            "--manifest".into(),
            p(&m.path("m.json")).into(),
            "--weights".into(),
            p(&m.path("w.st")).into(),
            "--out".into(),
            p(&m.path("x.json")).into(),
        ];
        a.extend(extra.iter().map(|s| s.to_string()));
        bin().args(&a).output().unwrap().status.code()
    };
    assert_eq!(base(&[]), Some(2), "missing --cr is a config error");
    assert_eq!(base(&["--cr", "1.5"]), Some(2));
    assert_eq!(base(&["--cr", "0.5", "--cr-max", "0.1"]), Some(4));
    assert_eq!(base(&["--bogus"]), Some(2));
    assert!(!m.path("x.json").exists());
}

#[test]
fn compress_is_deterministic_across_runs_and_jobs() {
    let m = model();
    gram(&m);
    let plan = allocate(&m, &["--cr", "0.3"]);
    let mut outputs = Vec::new();
    for (i, jobs) in ["1", "1", "4"].iter().enumerate() {
        let out = m.path(&format!("a{i}.st"));
        let o = compress(&m, &plan, &out, &["--jobs", jobs, "--init", "random", "--seed", "11"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((
            std::fs::read(&out).unwrap(),
            std::fs::read(sidecar_path(&out)).unwrap(),
            std::fs::read(m.path(&format!("a{i}.st.report.json"))).unwrap(),
        ));
    }
    for w in outputs.windows(2) {
        assert!(w[0].0 == w[1].0, "container differs");
        assert!(w[0].1 == w[1].1, "sidecar differs");
        assert_eq!(String::from_utf8_lossy(&w[0].2), String::from_utf8_lossy(&w[1].2));
    }
}

#[test]
fn report_matches_serialized_bytes_and_plan_target() {
    let m = model();
    gram(&m);
    let plan_path = allocate(&m, &["--cr", "0.3"]);
    let plan = AllocationPlan::from_json_slice(&std::fs::read(&plan_path).unwrap()).unwrap();
    let out = m.path("a.st");
    assert!(compress(&m, &plan_path, &out, &[]).status.success());
    let rep = Report::from_json_slice(&std::fs::read(m.path("a.st.report.json")).unwrap()).unwrap();
    assert!(rep.achieved_cr_ideal >= plan.target_cr);

    // every value slot is used, so padded accounting equals the payload
    let c = tensorio::read_container(&out).unwrap();
    let payload: u64 = c.names().map(|n| c.bytes(n).unwrap().len() as u64).sum();
    assert_eq!(payload, rep.payload_bytes);
    assert!(8 * payload <= rep.bits_padded);
    let from_bytes = 1.0 - (8 * payload) as f64 / rep.bits_dense as f64;
    assert!(rep.achieved_cr_padded <= from_bytes);

    // the standalone report command agrees on the losses
    let again = m.path("r.json");
    ok(&[
        "report",
        "--manifest",
        p(&m.path("m.json")),
        "--weights",
        p(&m.path("w.st")),
        "--grams",
        p(&m.path("g.st")),
        "--artifacts",
        p(&out),
        "--out",
        p(&again),
    ]);
    let rep2 = Report::from_json_slice(&std::fs::read(again).unwrap()).unwrap();
    for (a, b) in rep.layers.iter().zip(&rep2.layers) {
        assert_eq!(a.functional_loss, b.functional_loss);
        assert_eq!(a.bits_padded, b.bits_padded);
    }
}

#[test]
fn all_dense_plan_is_passthrough() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = TensorSet::new();
    w.insert("x", Tensor::from_f32(vec![4, 4], &[0.5; 16]).unwrap()).unwrap();
    tensorio::write_container(dir.path().join("w.st"), &w).unwrap();
    std::fs::write(dir.path().join("m.json"), r#"{"layers":[{"weight":"x"}]}"#).unwrap();
    let plan = dir.path().join("plan.json");
    ok(&[
        "allocate",
        "--manifest",
        p(&dir.path().join("m.json")),
        "--weights",
        p(&dir.path().join("w.st")),
        "--static-cr",
        "0.9",
        "--out",
        p(&plan),
    ]);
    let out = dir.path().join("a.st");
    ok(&[
        "compress",
        "--manifest",
        p(&dir.path().join("m.json")),
        "--weights",
        p(&dir.path().join("w.st")),
        "--plan",
        p(&plan),
        "--out",
        p(&out),
    ]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(dir.path().join("w.st")).unwrap());
    let back = dir.path().join("back.st");
    ok(&["reconstruct", "--artifacts", p(&out), "--out", p(&back)]);
    assert_eq!(std::fs::read(back).unwrap(), std::fs::read(dir.path().join("w.st")).unwrap());
}

#[test]
fn exactly_representable_layer_reconstructs() {
    // columns drawn from two orthogonal 2-dim subspaces: exact at k = 4, s = 2
    let dir = tempfile::tempdir().unwrap();
    let (m, n) = (16, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut data = vec![0f32; m * n];
    for j in 0..n {
        let base = if j % 2 == 0 { 0 } else { 8 };
        for off in 0..2 {
            data[(base + off) * n + j] = rng.random_range(0.5f32..1.0);
        }
    }
    let mut w = TensorSet::new();
    w.insert("x", Tensor::from_f32(vec![m, n], &data).unwrap()).unwrap();
    tensorio::write_container(dir.path().join("w.st"), &w).unwrap();
    std::fs::write(dir.path().join("m.json"), r#"{"layers":[{"weight":"x"}]}"#).unwrap();
    let plan = dir.path().join("plan.json");
    ok(&[
        "allocate",
        "--manifest",
        p(&dir.path().join("m.json")),
        "--weights",
        p(&dir.path().join("w.st")),
        "--static-cr",
        "0.6",
        "--out",
        p(&plan),
    ]);
    let out = dir.path().join("a.st");
    ok(&[
        "compress",
        "--manifest",
        p(&dir.path().join("m.json")),
        "--weights",
        p(&dir.path().join("w.st")),
        "--plan",
        p(&plan),
        "--out",
        p(&out),
    ]);
    let arts = Artifacts::read(&out).unwrap();
    let back = dir.path().join("back.st");
    ok(&["reconstruct", "--artifacts", p(&out), "--out", p(&back)]);
    let rec = tensorio::load_weight(&tensorio::read_container(&back).unwrap(), "x", Default::default()).unwrap();
    let max_err = rec.data().iter().zip(&data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(max_err < 1e-3, "max error {max_err}");
    // same code path as the artifact itself
    let direct = arts.layers[0].reconstruct().unwrap();
    assert_eq!(rec.get(3, 5), direct[(3, 5)] as f32);
}

#[test]
fn svd_and_v2_baselines_share_the_io_path() {
    let m = model();
    gram(&m);
    let plan = allocate(&m, &["--cr", "0.3"]);
    let out = m.path("svd.st");
    let o = compress(&m, &plan, &out, &["--baseline", "svd"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let arts = Artifacts::read(&out).unwrap();
    assert!(arts.layers.iter().all(|l| matches!(l, compot::artifact::LayerArtifact::LowRank(_))));

    // v2 needs its own plan
    assert_eq!(compress(&m, &plan, &m.path("v.st"), &["--baseline", "v2-alloc"]).status.code(), Some(2));
    let v2 = m.path("v2.json");
    let o = run(&[
        "allocate",
        "--manifest",
        p(&m.path("m.json")),
        "--weights",
        p(&m.path("w.st")),
        "--grams",
        p(&m.path("g.st")),
        "--cr",
        "0.3",
        "--baseline",
        "v2-alloc",
        "--out",
        p(&v2),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let plan = AllocationPlan::from_json_slice(&std::fs::read(&v2).unwrap()).unwrap();
    assert_eq!(plan.mode, PlanMode::V2);
    // the two q_proj layers form one group whose kept fractions average to 0.7
    let q: Vec<f64> = plan.matrices.iter().filter(|e| e.group == "q_proj").map(|e| 1.0 - e.cr).collect();
    assert!((q.iter().sum::<f64>() / 2.0 - 0.7).abs() < 1e-12, "{:#?}", plan.matrices);
    assert!(compress(&m, &v2, &m.path("v.st"), &["--baseline", "v2-alloc"]).status.success());
}

#[test]
fn failure_leaves_no_partial_output() {
    let m = model();
    // all-zero Gram for every layer
    let mut g = TensorSet::new();
    for (name, dim) in [("blk.0.q_proj", 24), ("blk.0.up_proj", 24), ("blk.1.q_proj", 24)] {
        g.insert(format!("{name}/gram"), Tensor::from_f64(vec![dim, dim], &vec![0.0; dim * dim]).unwrap())
            .unwrap();
    }
    tensorio::write_container(m.path("g.st"), &g).unwrap();
    let plan = allocate(&m, &["--cr", "0.3"]);
    let out = m.path("a.st");
    let o = compress(&m, &plan, &out, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gram not factorizable"));
    assert!(!out.exists());
    assert!(!sidecar_path(&out).exists());
    assert!(!m.path("a.st.report.json").exists());
}

#[test]
fn corrupt_artifacts_are_rejected() {
    let m = model();
    let plan = allocate(&m, &["--static-cr", "0.3"]);
    let out = m.path("a.st");
    assert!(compress(&m, &plan, &out, &[]).status.success());
    let c = tensorio::read_container(&out).unwrap();
    let mut set = c.to_tensor_set();
    let name = "blk.0.q_proj/S_mask";
    let t = set.get(name).unwrap();
    let mut bytes = t.bytes().to_vec();
    bytes[0] ^= 0xff;
    let mut fresh = TensorSet::new();
    for (n, t) in set.iter() {
        if n != name {
            fresh.insert(n, t.clone()).unwrap();
        }
    }
    fresh.insert(name, Tensor::from_u8(vec![bytes.len()], bytes).unwrap()).unwrap();
    set = fresh;
    tensorio::write_container(&out, &set).unwrap();
    let o = run(&["reconstruct", "--artifacts", p(&out), "--out", p(&m.path("b.st"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupt packed codes"));
}
