//! Seeded synthetic turbofan corpus with the published per-subset unit and
//! window counts. Each engine degrades along d(t) = exp(-(F-t)/lambda), so
//! remaining life is recoverable from sensor level modulo per-unit wear
//! spread and measurement noise.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetId, EngineRun};
use crate::channels::{NUM_CHANNELS, NUM_SENSORS};
use crate::error::{Error, Result};

/// Per-sensor signal model: resting level, degradation amplitude for each
/// fault mode, measurement noise, and operating-condition sensitivity.
struct SensorModel {
    base: f64,
    amp_hpc: f64,
    amp_fan: f64,
    sigma: f64,
    cond_scale: f64,
}

const fn s(base: f64, amp_hpc: f64, amp_fan: f64, sigma: f64, cond_scale: f64) -> SensorModel {
    SensorModel {
        base,
        amp_hpc,
        amp_fan,
        sigma,
        cond_scale,
    }
}

/// Indexed like the sensor channels: T2, T24, T30, T50, P2, P15, P30, Nf,
/// Nc, epr, Ps30, phi, NRf, NRc, BPR, farB, htBleed, Nf_dmd, PCNfR_dmd,
/// W31, W32.
const SENSOR_MODELS: [SensorModel; NUM_SENSORS] = [
    s(518.67, 0.0, 0.0, 0.0, -16.0),
    s(642.0, 5.0, 8.0, 0.08, -24.0),
    s(1585.0, 18.0, 6.0, 0.25, -48.0),
    s(1400.0, 25.0, 10.0, 0.35, -56.0),
    s(14.62, 0.0, 0.0, 0.0, -1.9),
    s(21.61, 0.02, 0.06, 0.002, -2.8),
    s(553.0, -6.0, -2.5, 0.09, -44.0),
    s(2388.0, 1.5, 4.0, 0.03, -60.0),
    s(9060.0, 30.0, 10.0, 0.5, -180.0),
    s(1.30, 0.0, 0.0, 0.0, -0.11),
    s(47.3, 1.1, 0.5, 0.015, -3.6),
    s(521.0, -7.0, -3.0, 0.10, -40.0),
    s(2388.0, 1.6, 4.2, 0.03, -18.0),
    s(8130.0, 28.0, 9.0, 0.45, -22.0),
    s(8.41, 0.12, 0.30, 0.002, 0.36),
    s(0.03, 0.0, 0.0, 0.0, -0.004),
    s(390.0, 4.0, 1.5, 0.06, -24.0),
    s(2388.0, 0.0, 0.0, 0.0, -44.0),
    s(100.0, 0.0, 0.0, 0.0, -8.0),
    s(38.9, -0.7, -1.0, 0.012, -9.5),
    s(23.36, -0.42, -0.6, 0.008, -5.7),
];

/// Operating regimes for the six-condition subsets: altitude, Mach, and
/// throttle, with a scalar coefficient driving per-sensor offsets.
const CONDITIONS: [(f64, f64, f64, f64); 6] = [
    (0.0, 0.0, 100.0, 0.0),
    (10.0, 0.25, 100.0, 0.35),
    (20.0, 0.7, 100.0, 0.8),
    (25.0, 0.62, 60.0, 1.3),
    (35.0, 0.84, 100.0, 1.7),
    (42.0, 0.84, 100.0, 2.1),
];

struct DatasetParams {
    train_units: usize,
    test_units: usize,
    /// Required total training-file window count at T=100, shift=5.
    window_total: usize,
    k_lo: i64,
    k_hi: i64,
    six_conditions: bool,
    two_fault_modes: bool,
}

fn params(id: DatasetId) -> DatasetParams {
    match id {
        DatasetId::FD001 => DatasetParams {
            train_units: 100,
            test_units: 100,
            window_total: 2286,
            k_lo: 10,
            k_hi: 33,
            six_conditions: false,
            two_fault_modes: false,
        },
        DatasetId::FD002 => DatasetParams {
            train_units: 260,
            test_units: 259,
            window_total: 5975,
            k_lo: 10,
            k_hi: 33,
            six_conditions: true,
            two_fault_modes: false,
        },
        DatasetId::FD003 => DatasetParams {
            train_units: 100,
            test_units: 100,
            window_total: 2662,
            k_lo: 13,
            k_hi: 38,
            six_conditions: false,
            two_fault_modes: true,
        },
        DatasetId::FD004 => DatasetParams {
            train_units: 249,
            test_units: 248,
            window_total: 6834,
            k_lo: 13,
            k_hi: 39,
            six_conditions: true,
            two_fault_modes: true,
        },
    }
}

/// A generated subset: raw runs plus the per-unit fault mode (0 = compressor
/// wear, 1 = fan wear), which files do not record.
pub struct SynthDataset {
    pub id: DatasetId,
    pub train: Vec<EngineRun>,
    pub test: Vec<EngineRun>,
    pub train_fault_modes: Vec<u8>,
}

/// Windows a run of length f contributes at T=100, shift=5: strided ends
/// plus a final window, one window when shorter than T.
fn windows_for_length(f: i64) -> i64 {
    if f < 100 {
        return 1;
    }
    let k = (f - 100) / 5;
    k + 1 + i64::from((f - 100) % 5 != 0)
}

/// Draw per-unit failure cycles whose strided window counts sum to exactly
/// the published total. Residual mass is spread one cycle-stride at a time.
fn draw_failure_cycles(p: &DatasetParams, rng: &mut impl Rng) -> Vec<i64> {
    let n = p.train_units;
    let mut ks: Vec<i64> = (0..n).map(|_| rng.gen_range(p.k_lo..=p.k_hi)).collect();
    let rems: Vec<i64> = (0..n)
        .map(|_| if rng.gen_bool(0.5) { rng.gen_range(1..=4) } else { 0 })
        .collect();
    let n_rem = rems.iter().filter(|r| **r != 0).count() as i64;
    let target_k = p.window_total as i64 - n as i64 - n_rem;
    let mut delta = target_k - ks.iter().sum::<i64>();
    let mut i = 0usize;
    let mut guard = 0usize;
    while delta != 0 {
        if delta > 0 && ks[i] < 80 {
            ks[i] += 1;
            delta -= 1;
        } else if delta < 0 && ks[i] > 3 {
            ks[i] -= 1;
            delta += 1;
        }
        i = (i + 1) % n;
        guard += 1;
        assert!(guard < n * 200, "window budget cannot be balanced");
    }
    let cycles: Vec<i64> = ks.iter().zip(&rems).map(|(k, r)| 100 + 5 * k + r).collect();
    debug_assert_eq!(
        cycles.iter().map(|&f| windows_for_length(f)).sum::<i64>(),
        p.window_total as i64
    );
    cycles
}

/// Synthesize one unit's channel block over `cycles` steps toward failure
/// at cycle `failure`.
#[allow(clippy::too_many_arguments)]
fn synth_run(
    unit_id: u32,
    cycles: usize,
    failure: i64,
    fault_mode: u8,
    six_conditions: bool,
    rng: &mut impl Rng,
) -> EngineRun {
    let unit_scale = rng.gen_range(0.85..1.15);
    let lambda = rng.gen_range(55.0..65.0);
    let mut channels = Vec::with_capacity(cycles * NUM_CHANNELS);
    for t in 1..=cycles as i64 {
        let d = (-((failure - t) as f64) / lambda).exp();
        let (op1, op2, op3, coeff) = if six_conditions {
            let (alt, mach, tra, coeff) = CONDITIONS[rng.gen_range(0..CONDITIONS.len())];
            (
                alt + rng.gen_range(-0.003..=0.003),
                mach + rng.gen_range(-0.0004..=0.0004),
                tra,
                coeff,
            )
        } else {
            (
                rng.gen_range(-0.0087..=0.0087),
                rng.gen_range(-0.0006..=0.0006),
                100.0,
                0.0,
            )
        };
        channels.push(op1);
        channels.push(op2);
        channels.push(op3);
        for m in &SENSOR_MODELS {
            let amp = if fault_mode == 1 { m.amp_fan } else { m.amp_hpc };
            let noise = if m.sigma > 0.0 {
                Normal::new(0.0, m.sigma).unwrap().sample(rng)
            } else {
                0.0
            };
            channels.push(m.base + amp * d * unit_scale + m.cond_scale * coeff + noise);
        }
    }
    EngineRun {
        unit_id,
        channels,
        cycles,
        failure_cycle: failure as u32,
    }
}

/// Generate one subset deterministically from the seed.
pub fn generate(id: DatasetId, seed: u64) -> SynthDataset {
    let p = params(id);
    let dataset_tag = match id {
        DatasetId::FD001 => 1,
        DatasetId::FD002 => 2,
        DatasetId::FD003 => 3,
        DatasetId::FD004 => 4,
    };
    let mut rng = crate::seeds::rng(seed, &[0x5d17, dataset_tag]);

    let failures = draw_failure_cycles(&p, &mut rng);
    let train_fault_modes: Vec<u8> = (0..p.train_units)
        .map(|_| u8::from(p.two_fault_modes && rng.gen_bool(0.5)))
        .collect();
    let train: Vec<EngineRun> = failures
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            synth_run(
                i as u32 + 1,
                f as usize,
                f,
                train_fault_modes[i],
                p.six_conditions,
                &mut rng,
            )
        })
        .collect();

    let test: Vec<EngineRun> = (0..p.test_units)
        .map(|i| {
            let k = rng.gen_range(p.k_lo..=p.k_hi);
            let rem = if rng.gen_bool(0.5) { rng.gen_range(1..=4) } else { 0 };
            let failure = 100 + 5 * k + rem;
            let frac = rng.gen_range(0.35..0.95);
            let observed = ((failure as f64 * frac).round() as i64)
                .clamp(30, failure - 1) as usize;
            let mode = u8::from(p.two_fault_modes && rng.gen_bool(0.5));
            synth_run(i as u32 + 1, observed, failure, mode, p.six_conditions, &mut rng)
        })
        .collect();

    SynthDataset {
        id,
        train,
        test,
        train_fault_modes,
    }
}

fn format_rows(runs: &[EngineRun]) -> String {
    let mut out = String::new();
    for run in runs {
        for t in 0..run.cycles {
            let _ = write!(out, "{} {}", run.unit_id, t + 1);
            for v in run.row(t) {
                let _ = write!(out, " {v:.4}");
            }
            out.push('\n');
        }
    }
    out
}

/// Write the three subset files into `dir`: training rows, test rows, and
/// one remaining-life value per test unit.
pub fn write_files(ds: &SynthDataset, dir: &Path) -> Result<[PathBuf; 3]> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    let train_path = dir.join(ds.id.train_file());
    let test_path = dir.join(ds.id.test_file());
    let rul_path = dir.join(ds.id.rul_file());
    let write = |path: &Path, content: &str| -> Result<()> {
        std::fs::write(path, content)
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
    };
    write(&train_path, &format_rows(&ds.train))?;
    write(&test_path, &format_rows(&ds.test))?;
    let ruls: String = ds
        .test
        .iter()
        .map(|r| format!("{}\n", r.failure_cycle - r.cycles as u32))
        .collect();
    write(&rul_path, &ruls)?;
    Ok([train_path, test_path, rul_path])
}

/// Published per-subset totals: (train units, test units, training windows).
pub fn published_counts(id: DatasetId) -> (usize, usize, usize) {
    let p = params(id);
    (p.train_units, p.test_units, p.window_total)
}
