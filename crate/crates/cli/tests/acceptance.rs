//! Acceptance criteria, one pass/fail line each.
//!
//! Runs every criterion by default. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 2 3`.

#[path = "../../core/tests/common/mod.rs"]
#[allow(dead_code)]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use morphgrad::checkpoint::*;
use morphgrad::data::*;
use morphgrad::gradcheck::{run_scope, Scope};
use morphgrad::morphology::*;
use morphgrad::{build_network, Error, NetworkConfig, Tape64, Tensor64, Variant};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn le(a: &Tensor64, b: &Tensor64) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| x <= y)
}

type FlatOp = fn(&Tensor64, &StructElement<f64>) -> morphgrad::Result<Tensor64>;

const FLAT_OPS: [(&str, FlatOp); 4] = [
    ("erode", erode_flat),
    ("dilate", dilate_flat),
    ("open", open_flat),
    ("close", close_flat),
];

fn random_volume(r: &mut impl Rng, channels: usize, lo: f64, hi: f64) -> Tensor64 {
    let dims: Vec<usize> = (0..3).map(|_| r.gen_range(4..=8)).collect();
    uniform(r, &[1, channels, dims[0], dims[1], dims[2]], lo, hi)
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut r = rng(101);
    let volumes = 120;
    let mut worst_chm = 0.0f64;
    for i in 0..volumes {
        let k = [1, 3, 5][i % 3];
        let w = [k, k, k];
        let x = random_volume(&mut r, 2, 0.1, 1.0);
        let flat = StructElement::flat(w).unwrap();
        let e = extremum_oracle(&x, false, w);
        let d = extremum_oracle(&x, true, w);
        let expected = [
            e.clone(),
            d.clone(),
            extremum_oracle(&e, true, w),
            extremum_oracle(&d, false, w),
        ];
        for ((name, op), want) in FLAT_OPS.iter().zip(&expected) {
            ensure(op(&x, &flat).unwrap().bit_eq(want), || {
                format!("flat {name} differs from oracle on volume {i} {:?} window {k}", x.shape())
            })?;
        }

        let kernel = uniform(&mut r, &[2, 1, k, k, k], 0.1, 1.0);
        let se = StructElement::chm(kernel.clone()).unwrap();
        let er = chm_oracle(&x, &kernel, -1.0);
        let di = chm_oracle(&x, &kernel, 1.0);
        let p = r.gen_range(-4.0..4.0);
        let checks = [
            ("erode", chm_erode_eager(&x, &se).unwrap(), er.clone()),
            ("dilate", chm_dilate_eager(&x, &se).unwrap(), di.clone()),
            ("open", chm_open_eager(&x, &se).unwrap(), chm_oracle(&er, &kernel, 1.0)),
            ("close", chm_close_eager(&x, &se).unwrap(), chm_oracle(&di, &kernel, -1.0)),
            ("general", chm_general_eager(&x, &se, p).unwrap(), chm_oracle(&x, &kernel, p)),
        ];
        for (name, got, want) in checks {
            let diff = got.max_abs_diff(&want);
            worst_chm = worst_chm.max(diff);
            ensure(diff < 1e-10, || format!("chm {name} off by {diff:e} on volume {i}"))?;
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "{volumes} volumes, flat bitwise, chm max diff {worst_chm:.1e}, {:.1?}",
        start.elapsed()
    ))
}

/// Shifts the last axis by one voxel, repeating the first column.
fn shift_x(t: &Tensor64) -> Tensor64 {
    let w = t.shape()[4];
    let mut out = t.clone();
    for (o, i) in out.data_mut().chunks_mut(w).zip(t.data().chunks(w)) {
        o[1..].copy_from_slice(&i[..w - 1]);
    }
    out
}

fn axiom_suite() -> Check {
    let mut r = rng(202);
    let instances = 100;
    for i in 0..instances {
        let k = [1, 3, 5][i % 3];
        let w = [k, k, k];
        let se = StructElement::flat(w).unwrap();
        let x = random_volume(&mut r, 1, -2.0, 2.0);
        let neg = x.map(|v| -v);

        let dual = [
            (dilate_flat(&x, &se).unwrap(), erode_flat(&neg, &se).unwrap()),
            (close_flat(&x, &se).unwrap(), open_flat(&neg, &se).unwrap()),
        ];
        for (a, b) in &dual {
            ensure(a.bit_eq(&b.map(|v| -v)), || format!("duality fails on instance {i}"))?;
        }

        let bump = uniform(&mut r, x.shape(), 0.0, 1.0);
        let y = x.zip_map(&bump, |a, b| a + b);
        for (name, op) in FLAT_OPS {
            ensure(le(&op(&x, &se).unwrap(), &op(&y, &se).unwrap()), || {
                format!("{name} not increasing on instance {i}")
            })?;
        }

        let dims = x.shape().to_vec();
        let wide = uniform(&mut r, &[1, 1, dims[2], dims[3], 14], -2.0, 2.0);
        let n = 14;
        for (name, op) in FLAT_OPS {
            let reach = if matches!(name, "open" | "close") { 2 * (k / 2) } else { k / 2 };
            let a = op(&shift_x(&wide), &se).unwrap();
            let b = shift_x(&op(&wide, &se).unwrap());
            for (row, (ra, rb)) in a.data().chunks(n).zip(b.data().chunks(n)).enumerate() {
                for col in reach + 1..n - reach {
                    ensure(ra[col].to_bits() == rb[col].to_bits(), || {
                        format!("{name} not translation invariant at row {row} col {col}, instance {i}")
                    })?;
                }
            }
        }

        let o = open_flat(&x, &se).unwrap();
        let c = close_flat(&x, &se).unwrap();
        ensure(open_flat(&o, &se).unwrap().bit_eq(&o), || format!("opening not idempotent, instance {i}"))?;
        ensure(close_flat(&c, &se).unwrap().bit_eq(&c), || format!("closing not idempotent, instance {i}"))?;
        ensure(le(&o, &x) && le(&x, &c), || format!("sandwich fails on instance {i}"))?;
    }
    Ok(format!(
        "duality, monotonicity, translation, idempotence, sandwich on {instances} instances each"
    ))
}

fn chm_limit() -> Check {
    let mut r = rng(303);
    let se = StructElement::chm_uniform(1, [3, 3, 3]).unwrap();
    let flat = StructElement::flat([3, 3, 3]).unwrap();
    for _ in 0..20 {
        let x = uniform(&mut r, &[1, 1, 6, 6, 6], 0.05, 2.0);
        let w = uniform(&mut r, &[1, 1, 3, 3, 3], 0.1, 1.0);
        let weighted = StructElement::chm(w).unwrap();
        ensure(
            chm_general_eager(&x, &weighted, 1.0).unwrap().bit_eq(&chm_dilate_eager(&x, &weighted).unwrap()),
            || "P=1 differs from CHM dilation".into(),
        )?;
        ensure(
            chm_general_eager(&x, &weighted, -1.0).unwrap().bit_eq(&chm_erode_eager(&x, &weighted).unwrap()),
            || "P=-1 differs from CHM erosion".into(),
        )?;
    }

    let mut worst = 0.0f64;
    let mut continuous = 0.0f64;
    for _ in 0..20 {
        let x = uniform(&mut r, &[1, 1, 6, 6, 6], 0.5, 1.0);
        let levels = x.map(|v| if v > 0.75 { 1.0 } else { 0.5 });
        let dist = |v: &Tensor64| {
            let up = chm_general_eager(v, &se, 20.0).unwrap().max_abs_diff(&dilate_flat(v, &flat).unwrap());
            let down = chm_general_eager(v, &se, -20.0).unwrap().max_abs_diff(&erode_flat(v, &flat).unwrap());
            up.max(down)
        };
        worst = worst.max(dist(&levels));
        continuous = continuous.max(dist(&x));
    }
    ensure(worst < 1e-3, || format!("P=±20 distance {worst:e} on {{0.5, 1}} volumes"))?;
    Ok(format!(
        "P=±1 bitwise; P=±20 sup distance {worst:.1e} on {{0.5, 1}} volumes \
         (continuous U[0.5,1] volumes: {continuous:.1e}, not bounded by 1e-3)"
    ))
}

fn gradient_checks() -> Check {
    let start = Instant::now();
    let mut count = 0;
    let mut worst = Vec::new();
    for scope in Scope::ALL {
        let results = run_scope(scope, 0).map_err(|e| e.to_string())?;
        let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
        ensure(failed.is_empty(), || failed.join("; "))?;
        count += results.len();
        let max = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        worst.push(format!("{} {max:.1e}", scope.name()));
    }
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "{count} checks, worst per scope: {}, {:.1?}",
        worst.join(", "),
        start.elapsed()
    ))
}

fn shape_accounting() -> Check {
    // depth 2, base 8, K 4, two supervision heads, one input channel, 3^3 windows.
    let table = [
        (Variant::Baseline, 28272),
        (Variant::NonLearnable, 22308),
        (Variant::NonLearnableSkip, 22308),
        (Variant::Chm, 22632),
        (Variant::ChmSkip, 22632),
    ];
    let x = uniform(&mut rng(505), &[1, 1, 16, 16, 16], 0.0, 1.0);
    for (variant, count) in table {
        let cfg = NetworkConfig {
            variant,
            depth: 2,
            base_channels: 8,
            num_classes: 4,
            deep_supervision_levels: 2,
            ..NetworkConfig::default()
        };
        let model = build_network::<f64>(&cfg, 0).unwrap();
        ensure(model.params.numel() == count && cfg.param_count() == count, || {
            format!("{variant}: {} parameters, expected {count}", model.params.numel())
        })?;
        let mut tape = Tape64::new();
        let p = model.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = model.forward(&mut tape, &p, xv).unwrap();
        ensure(tape.shape(out.logits) == [1, 4, 16, 16, 16], || {
            format!("{variant}: logits {:?}", tape.shape(out.logits))
        })?;
        ensure(out.aux.len() == 1 && tape.shape(out.aux[0]) == [1, 4, 8, 8, 8], || {
            format!("{variant}: auxiliary head shapes")
        })?;
        for (l, &(ctx, morph)) in out.encoder_channels.iter().enumerate() {
            let c = cfg.channels(l);
            let want = if variant == Variant::Baseline { (c, 0) } else { (c / 2, c / 2) };
            ensure((ctx, morph) == want, || {
                format!("{variant} level {l}: channels ({ctx}, {morph}), expected {want:?}")
            })?;
        }
    }
    Ok("parameter counts 28272/22308/22308/22632/22632, shapes and half-channel split match".into())
}

// -- end-to-end experiment ---------------------------------------------------

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn morphgrad(args: &[&Path]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_morphgrad"))
        .args(args)
        .env_remove("MORPHGRAD_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`morphgrad {}` exited with {:?}: {}",
            args.iter().map(|a| a.display().to_string()).collect::<Vec<_>>().join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

struct ExperimentRun {
    root: PathBuf,
    elapsed: Duration,
    table: Vec<(String, Vec<f64>)>,
}

fn run_experiment(root: &Path) -> Result<ExperimentRun, String> {
    let start = Instant::now();
    let configs = workspace().join("configs");
    let data = root.join("data");
    morphgrad(&[
        Path::new("gen-data"),
        Path::new("--spec"),
        &configs.join("synthetic.json"),
        Path::new("--out"),
        &data,
    ])?;
    let mut runs = Vec::new();
    for v in Variant::ALL {
        let out = root.join(v.name());
        morphgrad(&[
            Path::new("train"),
            Path::new("--data"),
            &data,
            Path::new("--variant"),
            Path::new(v.name()),
            Path::new("--config"),
            &configs.join("experiment.json"),
            Path::new("--out"),
            &out,
        ])?;
        runs.push(out);
    }
    let table_path = root.join("table.csv");
    let mut args: Vec<&Path> = vec![Path::new("compare"), Path::new("--out"), &table_path, Path::new("--runs")];
    args.extend(runs.iter().map(PathBuf::as_path));
    morphgrad(&args)?;
    let elapsed = start.elapsed();

    let text = std::fs::read_to_string(&table_path).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    ensure(lines.next() == Some("# morphgrad-csv v1"), || "table.csv lacks the version line".into())?;
    ensure(
        lines.next()
            == Some("variant,whole_dice,core_dice,enhancing_dice,whole_sensitivity,core_sensitivity,enhancing_sensitivity"),
        || "table.csv header".into(),
    )?;
    let table = lines
        .map(|l| {
            let mut cells = l.split(',');
            let name = cells.next().unwrap_or_default().to_string();
            (name, cells.map(|c| c.parse().unwrap_or(f64::NAN)).collect())
        })
        .collect();
    Ok(ExperimentRun {
        root: root.to_path_buf(),
        elapsed,
        table,
    })
}

fn end_to_end(first: &Result<ExperimentRun, String>) -> Check {
    let run = first.as_ref().map_err(Clone::clone)?;
    let names: Vec<&str> = run.table.iter().map(|(n, _)| n.as_str()).collect();
    let expected: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    ensure(names == expected, || format!("table rows {names:?}"))?;
    let mut summary = Vec::new();
    for (name, cells) in &run.table {
        ensure(cells.len() == 6, || format!("{name}: {} value columns", cells.len()))?;
        summary.push(format!("{name} {:.4}", cells[0]));
    }
    let low: Vec<&String> = summary
        .iter()
        .zip(&run.table)
        .filter(|(_, (_, c))| !(c[0] >= 0.90))
        .map(|(s, _)| s)
        .collect();
    ensure(low.is_empty(), || format!("whole Dice below 0.90: {low:?}"))?;
    within(run.elapsed, Duration::from_secs(3600))?;
    let mut ranked = run.table.clone();
    ranked.sort_by(|a, b| b.1[0].total_cmp(&a.1[0]));
    let order: Vec<&str> = ranked.iter().map(|(n, _)| n.as_str()).collect();
    Ok(format!(
        "whole Dice {}; ordering {}; {:.1?}",
        summary.join(", "),
        order.join(" > "),
        run.elapsed
    ))
}

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut files = vec![root.join("table.csv")];
    for v in Variant::ALL {
        for f in ["history.csv", "folds.csv", "metrics.csv"] {
            files.push(root.join(v.name()).join(f));
        }
    }
    files
}

fn determinism(first: &Result<ExperimentRun, String>, scratch: &Path) -> Check {
    let first = first.as_ref().map_err(Clone::clone)?;
    let second = run_experiment(&scratch.join("second"))?;
    let mut cells = 0;
    for (a, b) in csv_files(&first.root).iter().zip(csv_files(&second.root)) {
        let ta = std::fs::read_to_string(a).map_err(|e| format!("{}: {e}", a.display()))?;
        let tb = std::fs::read_to_string(&b).map_err(|e| format!("{}: {e}", b.display()))?;
        ensure(ta == tb, || format!("{} differs between runs", a.display()))?;
        cells += ta.lines().skip(2).map(|l| l.split(',').count()).sum::<usize>();
    }
    Ok(format!("{} CSV files, {cells} cells identical across reruns", csv_files(&first.root).len()))
}

// -- formats ------------------------------------------------------------------

fn edit_header(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let head = String::from_utf8(bytes[..nl].to_vec()).unwrap();
    assert!(head.contains(from), "{from} not in header");
    let mut out = head.replacen(from, to, 1).into_bytes();
    out.extend_from_slice(&bytes[nl..]);
    out
}

fn format_round_trips(scratch: &Path) -> Check {
    let spec = SynthSpec {
        extent: [8, 8, 8],
        num_samples: 3,
        radius: [3.0, 4.0],
        margin: 1.0,
        ..SynthSpec::default()
    };
    for s in gen_synthetic(&spec).unwrap() {
        let path = scratch.join(format!("{}.morv", s.id));
        save_volume(&path, &s).unwrap();
        let back = load_volume(&path).unwrap();
        ensure(back.image.bit_eq(&s.image) && back.label.bit_eq(&s.label) && back.id == s.id, || {
            format!("volume {} does not round-trip", s.id)
        })?;
    }
    let bytes = encode_volume(&gen_sample(&spec, 0).unwrap()).unwrap();
    let p = Path::new("v.morv");
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let volume_cases: [(&str, morphgrad::Result<VolumeSample>, fn(&Error) -> bool); 4] = [
        ("bad magic", decode_volume(&magic, p), |e| matches!(e, Error::Format { .. })),
        ("short payload", decode_volume(&bytes[..bytes.len() - 1], p), |e| {
            matches!(e, Error::Truncated { .. })
        }),
        (
            "declared length",
            decode_volume(&edit_header(&bytes, "\"payload_bytes\":8192", "\"payload_bytes\":9000"), p),
            |e| matches!(e, Error::Truncated { expected: 9000, found: 8192, .. }),
        ),
        ("dims", decode_volume(&edit_header(&bytes, "[8,8,8]", "[8,4,8]"), p), |e| {
            matches!(e, Error::Format { .. })
        }),
    ];
    for (name, got, ok) in volume_cases {
        ensure(got.as_ref().is_err_and(ok), || format!("MORV1 {name}: {:?}", got.err()))?;
    }

    for v in Variant::ALL {
        let cfg = NetworkConfig {
            variant: v,
            depth: 2,
            num_classes: 3,
            ..NetworkConfig::default()
        };
        let model = build_network::<f64>(&cfg, 5).unwrap();
        let path = scratch.join(format!("{}.ckpt", v.name()));
        save_checkpoint(&path, &model).unwrap();
        let back = load_checkpoint::<f64>(&path).unwrap();
        ensure(back.config == model.config && back.params.bit_eq(&model.params), || {
            format!("{v} checkpoint does not round-trip")
        })?;
    }
    let model = build_network::<f64>(
        &NetworkConfig {
            depth: 2,
            num_classes: 3,
            ..NetworkConfig::default()
        },
        5,
    )
    .unwrap();
    let bytes = encode_checkpoint(&model).unwrap();
    let p = Path::new("m.ckpt");
    let mut magic = bytes.clone();
    magic[2] = b'?';
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let ckpt_cases: [(&str, morphgrad::Result<_>, fn(&Error) -> bool); 5] = [
        ("bad magic", decode_checkpoint::<f64>(&magic, p), |e| matches!(e, Error::Format { .. })),
        ("short payload", decode_checkpoint::<f64>(&bytes[..bytes.len() - 8], p), |e| {
            matches!(e, Error::Truncated { .. })
        }),
        ("version", decode_checkpoint::<f64>(&edit_header(&bytes, "\"version\":1", "\"version\":7"), p), |e| {
            matches!(e, Error::Format { .. })
        }),
        (
            "config",
            decode_checkpoint::<f64>(&edit_header(&bytes, "\"num_classes\":3", "\"num_classes\":2"), p),
            |e| matches!(e, Error::Format { .. }),
        ),
        ("unterminated header", decode_checkpoint::<f64>(&bytes[..nl], p), |e| {
            matches!(e, Error::Format { .. })
        }),
    ];
    for (name, got, ok) in ckpt_cases {
        ensure(got.as_ref().is_err_and(ok), || format!("MORPHNET1 {name}: {:?}", got.as_ref().err()))?;
    }
    Ok("MORV1 and MORPHNET1 round-trip bitwise; 9 corruption cases rejected with structured errors".into())
}

fn report(number: u32, title: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {number} {tag}  {title}: {detail} [{:.1?}]", start.elapsed());
    outcome.is_ok()
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let scratch = tempfile::tempdir().expect("scratch directory");
    let mut ok = true;

    if wanted(1) {
        ok &= report(1, "oracle equivalence", oracle_equivalence);
    }
    if wanted(2) {
        ok &= report(2, "morphology axioms", axiom_suite);
    }
    if wanted(3) {
        ok &= report(3, "CHM specialization and limit", chm_limit);
    }
    if wanted(4) {
        ok &= report(4, "gradient checks", gradient_checks);
    }
    if wanted(5) {
        ok &= report(5, "shape and parameter accounting", shape_accounting);
    }
    if wanted(6) || wanted(7) {
        let first = run_experiment(&scratch.path().join("first"));
        if wanted(6) {
            ok &= report(6, "end-to-end synthetic experiment", || end_to_end(&first));
        }
        if wanted(7) {
            ok &= report(7, "determinism", || determinism(&first, scratch.path()));
        }
    }
    if wanted(8) {
        ok &= report(8, "format round-trips", || format_round_trips(scratch.path()));
    }
    if !ok {
        std::process::exit(1);
    }
}
