//! Acceptance checks shared by the `acceptance` harness and the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use camreid::apra::{apra_forward, camera_logits, split_branches, ApraConfig, ApraParams};
use camreid::dataio::{self, DatasetManifest};
use camreid::gradsuite::{self, SuiteConfig};
use camreid::losses::{self, combined_loss};
use camreid::metrics::{
    cmc_rank_k, evaluate, gallery_map_per_camera, mean_ap, query_map_per_camera, EmbeddingRecord, Distance, Report,
    ReportTable, RetrievalProtocol, Split,
};
use camreid::tensor::{OpKind, Shape, Tape, Tensor};
use camreid::toylab::{compare_variants, TrainConfig, ToyWorldConfig};
use camreid::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Check {
            passed,
            detail: detail.into(),
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Check::new(false, detail)
    }
}

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

// ---------------------------------------------------------------- metrics

pub struct Dataset {
    pub query: Vec<EmbeddingRecord>,
    pub gallery: Vec<EmbeddingRecord>,
    pub protocol: RetrievalProtocol,
}

/// Seeded random retrieval problem: at most 200 records and 6 cameras.
///
/// Even seeds use small integer coordinates under Euclidean distance so that
/// exact distance ties occur; odd seeds use continuous coordinates and
/// alternate the distance.
pub fn random_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras = rng.random_range(2..=6u32);
    let persons = rng.random_range(2..=15u32);
    let dim = rng.random_range(1..=4usize);
    let n = rng.random_range(20..=200usize);
    let integer = seed.is_multiple_of(2);
    let distance = if !integer && seed % 4 == 3 { Distance::Cosine } else { Distance::Euclidean };
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for i in 0..n {
        let vector = (0..dim)
            .map(|_| if integer { rng.random_range(-2..=2) as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let person = rng.random_range(0..persons);
        let camera = rng.random_range(1..=cameras);
        // keep both splits populated
        let split = match i {
            0 => Split::Query,
            1 => Split::Gallery,
            _ if rng.random_bool(0.3) => Split::Query,
            _ => Split::Gallery,
        };
        let r = EmbeddingRecord::new(person, camera, split, vector);
        if split == Split::Query { query.push(r) } else { gallery.push(r) }
    }
    Dataset {
        query,
        gallery,
        protocol: RetrievalProtocol {
            distance,
            cross_camera_only: seed % 5 != 4,
        },
    }
}

fn naive_distance(d: Distance, a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    let mut sq = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
        sq += (a[k] - b[k]) * (a[k] - b[k]);
    }
    match d {
        Distance::Euclidean => sq,
        Distance::Cosine => 1.0 - dot / (na.sqrt() * nb.sqrt()),
    }
}

/// AP over `positives` when only `candidates` are ranked; positions by counting.
fn naive_ap(dist: &[f64], candidates: &[usize], positives: &[usize]) -> f64 {
    let pos = |i: usize| {
        1 + candidates
            .iter()
            .filter(|&&j| dist[j] < dist[i] || (dist[j] == dist[i] && j < i))
            .count()
    };
    let mut total = 0.0;
    for &p in positives {
        let r = pos(p);
        let above = positives.iter().filter(|&&q| pos(q) <= r).count();
        total += above as f64 / r as f64;
    }
    total / positives.len() as f64
}

#[derive(Debug, Default)]
pub struct NaiveMetrics {
    pub map: Option<f64>,
    pub cmc: BTreeMap<usize, f64>,
    pub q_map: BTreeMap<u32, (f64, usize)>,
    pub g_map: BTreeMap<u32, (f64, usize)>,
}

pub fn naive_metrics(ds: &Dataset, ks: &[usize]) -> NaiveMetrics {
    let mut aps = Vec::new();
    let mut hits = vec![0usize; ks.len()];
    let mut q_acc: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut g_acc: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for q in &ds.query {
        let dist: Vec<f64> = ds.gallery.iter().map(|g| naive_distance(ds.protocol.distance, &q.vector, &g.vector)).collect();
        let valid: Vec<usize> = (0..ds.gallery.len())
            .filter(|&j| {
                let g = &ds.gallery[j];
                !(ds.protocol.cross_camera_only && g.person_id == q.person_id && g.camera_id == q.camera_id)
            })
            .collect();
        let positives: Vec<usize> = valid.iter().copied().filter(|&j| ds.gallery[j].person_id == q.person_id).collect();
        if positives.is_empty() {
            continue;
        }
        let ap = naive_ap(&dist, &valid, &positives);
        aps.push(ap);
        q_acc.entry(q.camera_id).or_default().push(ap);
        let first = positives
            .iter()
            .map(|&p| 1 + valid.iter().filter(|&&j| dist[j] < dist[p] || (dist[j] == dist[p] && j < p)).count())
            .min()
            .unwrap();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first <= k {
                *h += 1;
            }
        }
        let cams: std::collections::BTreeSet<u32> = positives.iter().map(|&p| ds.gallery[p].camera_id).collect();
        for c in cams {
            let keep: Vec<usize> = valid
                .iter()
                .copied()
                .filter(|&j| ds.gallery[j].person_id != q.person_id || ds.gallery[j].camera_id == c)
                .collect();
            let pos_c: Vec<usize> = positives.iter().copied().filter(|&p| ds.gallery[p].camera_id == c).collect();
            g_acc.entry(c).or_default().push(naive_ap(&dist, &keep, &pos_c));
        }
    }
    let mean = |v: &Vec<f64>| (v.iter().sum::<f64>() / v.len() as f64, v.len());
    NaiveMetrics {
        map: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
        cmc: ks.iter().zip(&hits).map(|(&k, &h)| (k, h as f64 / aps.len().max(1) as f64)).collect(),
        q_map: q_acc.iter().map(|(c, v)| (*c, mean(v))).collect(),
        g_map: g_acc.iter().map(|(c, v)| (*c, mean(v))).collect(),
    }
}

pub const ORACLE_DATASETS: u64 = 20;
pub const ORACLE_TOLERANCE: f64 = 1e-12;
const CMC_KS: [usize; 4] = [1, 3, 5, 10];

/// Largest absolute difference between the library and the naive oracle.
pub fn oracle_difference(ds: &Dataset) -> Result<f64, String> {
    let naive = naive_metrics(ds, &CMC_KS);
    let (q, g, p) = (&ds.query, &ds.gallery, &ds.protocol);
    let Some(expected_map) = naive.map else {
        return match mean_ap(q, g, p) {
            Err(_) => Ok(0.0),
            Ok(v) => Err(format!("oracle has no valid query, library returned {v}")),
        };
    };
    let mut worst = (mean_ap(q, g, p).map_err(|e| e.to_string())? - expected_map).abs();
    for (k, v) in &naive.cmc {
        worst = worst.max((cmc_rank_k(q, g, p, *k).map_err(|e| e.to_string())? - v).abs());
    }
    for (lib, oracle, what) in [
        (query_map_per_camera(q, g, p).map_err(|e| e.to_string())?, &naive.q_map, "q"),
        (gallery_map_per_camera(q, g, p).map_err(|e| e.to_string())?, &naive.g_map, "g"),
    ] {
        if lib.keys().ne(oracle.keys()) {
            return Err(format!("{what}-mAP cameras differ: {:?} vs {:?}", lib.keys(), oracle.keys()));
        }
        for (c, s) in &lib {
            let (v, n) = oracle[c];
            if s.num_queries != n {
                return Err(format!("{what}-mAP camera {c}: {} queries vs {n}", s.num_queries));
            }
            worst = worst.max((s.value - v).abs());
        }
    }
    Ok(worst)
}

pub fn check_metric_oracle() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..ORACLE_DATASETS {
        match oracle_difference(&random_dataset(seed)) {
            Ok(d) => worst = worst.max(d),
            Err(e) => return Check::fail(format!("dataset {seed}: {e}")),
        }
    }
    let t = start.elapsed();
    Check::new(
        worst < ORACLE_TOLERANCE && t < Duration::from_secs(10),
        format!("{ORACLE_DATASETS} datasets, max |diff| {worst:.1e} (< 1e-12), {:.2}s (< 10s)", t.as_secs_f64()),
    )
}

/// Query-count-weighted per-camera q-mAP minus global mAP.
pub fn decomposition_gap(ds: &Dataset) -> Result<f64, String> {
    let eval = evaluate(&ds.query, &ds.gallery, &ds.protocol, Exec::Sequential).map_err(|e| e.to_string())?;
    let Ok(global) = eval.mean_ap() else {
        return Ok(0.0);
    };
    let per = eval.query_map_per_camera();
    let n: usize = per.values().map(|s| s.num_queries).sum();
    let weighted: f64 = per.values().map(|s| s.value * s.num_queries as f64).sum::<f64>() / n as f64;
    Ok((weighted - global).abs())
}

pub fn check_decomposition() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..ORACLE_DATASETS {
        match decomposition_gap(&random_dataset(seed)) {
            Ok(d) => worst = worst.max(d),
            Err(e) => return Check::fail(format!("dataset {seed}: {e}")),
        }
    }
    Check::new(worst < 1e-12, format!("{ORACLE_DATASETS} datasets, max gap {worst:.1e} (< 1e-12)"))
}

// ---------------------------------------------------------------- gradients

/// Ops whose backward pass the suite must catch when sabotaged.
pub fn injectable_ops() -> Vec<OpKind> {
    OpKind::ALL.into_iter().filter(|k| *k != OpKind::Leaf).collect()
}

pub fn check_gradient_suite() -> Check {
    let start = Instant::now();
    let report = match gradsuite::run_suite(&SuiteConfig::default()) {
        Ok(r) => r,
        Err(e) => return Check::fail(e.to_string()),
    };
    if !report.all_passed() {
        let names: Vec<_> = report.failures().iter().map(|c| c.name).collect();
        return Check::fail(format!("failing cases: {names:?}"));
    }
    let worst = report
        .cases
        .iter()
        .map(|c| c.max_rel_error / c.tolerance)
        .fold(0.0, f64::max);
    let mut missed = Vec::new();
    for op in injectable_ops() {
        let cfg = SuiteConfig {
            seeds: 2,
            fault: Some(op),
            ..SuiteConfig::default()
        };
        let caught = gradsuite::run_suite(&cfg)
            .map(|r| r.failures().iter().any(|c| c.name.split('/').next() == Some(op.name())))
            .unwrap_or(false);
        if !caught {
            missed.push(op.name());
        }
    }
    let t = start.elapsed();
    Check::new(
        missed.is_empty() && t < Duration::from_secs(60),
        format!(
            "{} cases x {} seeds, worst error/tolerance {worst:.2}; {} injected faults, missed {missed:?}; {:.1}s (< 60s)",
            report.cases.len(),
            gradsuite::DEFAULT_SEEDS,
            injectable_ops().len(),
            t.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- attention block

fn block_config() -> ApraConfig {
    let mut cfg = ApraConfig::new(8);
    cfg.reduction_ratio = 2;
    cfg.spatial_kernel = 3;
    cfg
}

pub fn complement_is_exact() -> Result<(), String> {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ApraParams::init(&block_config(), 3, &mut rng);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let f = tape.constant(Tensor::uniform(Shape::new(2, 8, 6, 6), -2.0, 2.0, &mut rng));
        let out = apra_forward(&mut tape, f, &vars).map_err(|e| e.to_string())?;
        for pair in [out.channel, out.spatial] {
            let (m, mi) = (tape.value(pair.forward).data(), tape.value(pair.inverse).data());
            if let Some(i) = (0..m.len()).find(|&i| m[i] + mi[i] != 1.0 || !(m[i] > 0.0 && m[i] < 1.0)) {
                return Err(format!("seed {seed}: M {} + M' {} at {i}", m[i], mi[i]));
            }
        }
    }
    Ok(())
}

pub fn branch_swap_is_exact() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = ApraParams::init(&block_config(), 3, &mut rng);
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let f = tape.constant(Tensor::uniform(Shape::new(2, 8, 5, 5), -1.0, 1.0, &mut rng));
    let out = apra_forward(&mut tape, f, &vars).map_err(|e| e.to_string())?;
    let (p, c) = split_branches(&mut tape, f, &out.channel.swapped(), &out.spatial.swapped()).map_err(|e| e.to_string())?;
    if tape.value(p) != tape.value(out.camera) || tape.value(c) != tape.value(out.person) {
        return Err("swapped maps did not exchange the branches".into());
    }
    if tape.value(out.person) == tape.value(out.camera) {
        return Err("branches coincide; swap test is vacuous".into());
    }
    Ok(())
}

pub fn saturated_maps_give_residual_forms() -> Result<(), String> {
    let cfg = block_config();
    let mut params = ApraParams::zeros(&cfg, 3);
    params.channel_mlp_2.bias = Tensor::full(Shape::new(1, 8, 1, 1), 40.0);
    params.spatial_conv.bias = Tensor::full(Shape::new(1, 1, 1, 1), 80.0);
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = Tensor::uniform(Shape::new(2, 8, 5, 5), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let f = tape.constant(x.clone());
    let out = apra_forward(&mut tape, f, &vars).map_err(|e| e.to_string())?;
    if !tape.value(out.channel.forward).data().iter().chain(tape.value(out.spatial.forward).data()).all(|v| *v == 1.0) {
        return Err("maps did not saturate to 1".into());
    }
    for (i, v) in x.data().iter().enumerate() {
        let (p, c) = (tape.value(out.person).data()[i], tape.value(out.camera).data()[i]);
        if p != (2.0 * v).max(0.0) || c != v.max(0.0) {
            return Err(format!("element {i}: F {v}, person {p}, camera {c}"));
        }
    }
    Ok(())
}

/// Camera-loss gradients with the reversal on (scale `mu`) and replaced by identity.
fn camera_loss_grads(reverse: bool, mu: f64) -> Result<(Vec<Tensor>, Vec<Tensor>), String> {
    let mut cfg = block_config();
    cfg.reversal_scale = mu;
    cfg.reverse_gradients = reverse;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let params = ApraParams::init(&cfg, 3, &mut rng);
    let input = Tensor::uniform(Shape::new(3, 8, 5, 5), 0.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let f = tape.param(input);
    let run = |tape: &mut Tape| -> camreid::Result<_> {
        let out = apra_forward(tape, f, &vars)?;
        let logits = camera_logits(tape, out.camera, &vars, &cfg)?;
        tape.cross_entropy(logits, &[0, 2, 1])
    };
    let loss = run(&mut tape).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let get = |v| grads.get_or_zeros(v, tape.shape(v));
    let mut upstream: Vec<Tensor> = vars.attention().into_iter().map(get).collect();
    upstream.push(get(f));
    let head = vec![get(vars.camera_head.weight), get(vars.camera_head.bias)];
    Ok((upstream, head))
}

pub fn reversal_negates_upstream(mu: f64) -> Result<(), String> {
    let (up_rev, head_rev) = camera_loss_grads(true, mu)?;
    let (up_id, head_id) = camera_loss_grads(false, mu)?;
    if head_rev != head_id {
        return Err("camera-head gradients changed under reversal".into());
    }
    // scaling by a power of two commutes with rounding; other scales do not
    let exact = mu.log2().fract() == 0.0;
    let mut nonzero = 0;
    for (r, i) in up_rev.iter().zip(&up_id) {
        for (a, b) in r.data().iter().zip(i.data()) {
            let ok = if exact { *a == -mu * b } else { (a + mu * b).abs() <= 1e-12 * (mu * b).abs() };
            if !ok {
                return Err(format!("upstream gradient {a} is not -{mu} x {b}"));
            }
            nonzero += usize::from(*b != 0.0);
        }
    }
    if nonzero == 0 {
        return Err("all upstream gradients are zero".into());
    }
    Ok(())
}

pub fn check_apra_invariants() -> Check {
    type Invariant = (&'static str, fn() -> Result<(), String>);
    let checks: [Invariant; 4] = [
        ("complement", complement_is_exact),
        ("branch swap", branch_swap_is_exact),
        ("saturated maps", saturated_maps_give_residual_forms),
        ("reversal sign", || reversal_negates_upstream(1.0)),
    ];
    let failed: Vec<String> = checks
        .iter()
        .filter_map(|(name, f)| f().err().map(|e| format!("{name}: {e}")))
        .collect();
    if failed.is_empty() {
        Check::new(true, "M + M' = 1 exact, branch swap exact, forced M = 1 exact, reversal gives exactly -1 x gradient")
    } else {
        Check::fail(failed.join("; "))
    }
}

// ---------------------------------------------------------------- losses

fn column(values: &[f64]) -> Tensor {
    Tensor::from_vec(Shape::new(values.len(), 1, 1, 1), values.to_vec()).unwrap()
}

pub fn uniform_ce_error() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (k, fill) in [(2, 0.0), (5, 3.25), (10, -7.0), (751, 0.0)] {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::full(Shape::new(4, k, 1, 1), fill));
        let ce = tape.cross_entropy(logits, &[0, 1, k - 1, k / 2]).map_err(|e| e.to_string())?;
        let v = tape.value(ce).item().map_err(|e| e.to_string())?;
        let plain = losses::cross_entropy_value(&vec![vec![fill; k]; 2], &[0, k - 1]).map_err(|e| e.to_string())?;
        let ln_k = (k as f64).ln();
        worst = worst.max((v - ln_k).abs()).max((plain - ln_k).abs());
    }
    Ok(worst)
}

/// Batch-hard triplet loss of 1-D embeddings with two labels.
pub fn triplet_value(points: &[f64], labels: &[usize], margin: f64) -> Result<f64, String> {
    let mut tape = Tape::new();
    let e = tape.constant(column(points));
    let t = tape.triplet_batch_hard(e, labels, margin).map_err(|e| e.to_string())?;
    tape.value(t).item().map_err(|e| e.to_string())
}

pub fn combined_value(terms: [f64; 3], weight: f64) -> Result<f64, String> {
    let mut tape = Tape::new();
    let [p, t, c] = terms.map(|v| tape.constant(Tensor::scalar(v)));
    let l = combined_loss(&mut tape, p, t, Some(c), weight).map_err(|e| e.to_string())?;
    tape.value(l).item().map_err(|e| e.to_string())
}

pub fn check_loss_anchors() -> Check {
    let run = || -> Result<String, String> {
        let ce = uniform_ce_error()?;
        if ce >= 1e-9 {
            return Err(format!("uniform-logit CE off ln K by {ce:e}"));
        }
        // every anchor: hardest positive at 0.5, hardest negative at 10 or more
        let zero = triplet_value(&[0.0, 0.5, 10.0, 10.5], &[0, 0, 1, 1], 0.3)?;
        // every anchor: hardest positive at 1, hardest negative at 0.5
        let one = triplet_value(&[0.0, 1.0, 0.5, 1.5], &[0, 0, 1, 1], 0.5)?;
        if zero != 0.0 || one != 1.0 {
            return Err(format!("triplet hand cases gave {zero} and {one}"));
        }
        let w = losses::DEFAULT_CAMERA_WEIGHT;
        let combined = combined_value([1.0, 0.5, 2.0], w)?;
        if w != 0.01 || combined != (1.0 + 0.5) + 0.01 * 2.0 || (combined - 1.52).abs() > 1e-15 {
            return Err(format!("combined loss {combined} with weight {w}"));
        }
        Ok(format!("uniform CE |err| {ce:.1e} (< 1e-9); triplet 0 and 1 exact; combined {combined}"))
    };
    match run() {
        Ok(d) => Check::new(true, d),
        Err(e) => Check::fail(e),
    }
}

// ---------------------------------------------------------------- golden reports

pub const REPORT_FILES: [&str; 3] = ["report.json", "summary.csv", "per_camera.csv"];

pub fn render(report: &Report) -> [String; 3] {
    [report.to_json(), report.summary_csv(), report.per_camera_csv()]
}

pub fn market_report() -> Result<Report, String> {
    let text = std::fs::read_to_string(fixture("market_bagtricks/table.json")).map_err(|e| e.to_string())?;
    let table: ReportTable = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Report::from_table(table).map_err(|e| e.to_string())
}

pub fn handbuilt_report() -> Result<Report, String> {
    let manifest = DatasetManifest::load(&fixture("handbuilt/manifest.json")).map_err(|e| e.to_string())?;
    let load = |p: &Option<PathBuf>| dataio::load_embeddings(p.as_ref().unwrap(), &manifest).map_err(|e| e.to_string());
    let (q, g) = (load(&manifest.query)?, load(&manifest.gallery)?);
    let eval = evaluate(&q, &g, &manifest.protocol(), Exec::default()).map_err(|e| e.to_string())?;
    Report::from_evaluation(&eval, &manifest.name, &manifest.method()).map_err(|e| e.to_string())
}

pub fn golden_mismatches(report: &Report, dir: &str) -> Vec<String> {
    render(report)
        .iter()
        .zip(REPORT_FILES)
        .filter(|(body, name)| std::fs::read_to_string(fixture(&format!("{dir}/golden/{name}"))).ok().as_ref() != Some(*body))
        .map(|(_, name)| format!("{dir}/{name}"))
        .collect()
}

pub fn check_golden() -> Check {
    let mut bad = Vec::new();
    for (dir, report) in [("market_bagtricks", market_report()), ("handbuilt", handbuilt_report())] {
        match report {
            Ok(r) => bad.extend(golden_mismatches(&r, dir)),
            Err(e) => bad.push(format!("{dir}: {e}")),
        }
    }
    match market_report() {
        Ok(r) if bad.is_empty() => {
            let row = r.summary_csv().lines().nth(1).unwrap_or_default().to_string();
            Check::new(row == "Market,BagTricks,78.7,74.5,85.4,78.8", format!("6 files byte-identical; row {row}"))
        }
        _ => Check::fail(format!("mismatched: {bad:?}")),
    }
}

// ---------------------------------------------------------------- toy study

pub const TOY_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn check_toylab() -> Check {
    let start = Instant::now();
    let cmp = match compare_variants(&ToyWorldConfig::default(), &TrainConfig::default(), &TOY_SEEDS) {
        Ok(c) => c,
        Err(e) => return Check::fail(e.to_string()),
    };
    let t = start.elapsed();
    let (wq, wp) = (cmp.weakest_q_wins(), cmp.probe_wins());
    let outlier = ToyWorldConfig::default().outlier_camera().map(|c| c as u32);
    let outlier_weakest = cmp.baseline.iter().filter(|r| Some(r.weakest_q_camera) == outlier).count();
    let mut detail = format!(
        "weakest q-mAP up in {wq}/5, probe down in {wp}/5 (need 4/5 each); baseline weakest = outlier in {outlier_weakest}/5; {:.0}s (< 900s)",
        t.as_secs_f64()
    );
    for (b, a) in cmp.baseline.iter().zip(&cmp.apra) {
        detail.push_str(&format!(
            "\n      seed {}: weakest q {:.4} -> {:.4}, probe {:.4} -> {:.4}",
            b.seed, b.weakest_q_map, a.weakest_q_map, b.probe_acc, a.probe_acc
        ));
    }
    Check::new(wq >= 4 && wp >= 4 && t < Duration::from_secs(900), detail)
}
