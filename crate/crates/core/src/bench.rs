//! Range-scaling benchmark: latency and memory of the sparse pipeline and the
//! dense BEV baseline on identical scenes with a fixed point budget.
//!
//! Heap figures come from [`CountingAlloc`], which the benchmarking binary
//! has to install as its global allocator. Without it the allocator columns
//! read zero and the report says so.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use serde::Serialize;

use crate::config::{RunConfig, CODE_VERSION};
use crate::data_synth::{generate, scene_seed, Scene};
use crate::dense::{BevGrid, DenseBaseline};
use crate::error::{FsdError, Result};
use crate::model::FsdModel;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// System allocator wrapper that tracks live and peak heap bytes.
pub struct CountingAlloc;

fn grow(by: usize) {
    let now = CURRENT.fetch_add(by, Ordering::Relaxed) + by;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

// SAFETY: every call is forwarded unchanged to `System`; the counters are
// plain atomics and never allocate.
unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

/// Whether [`CountingAlloc`] is the active global allocator.
pub fn alloc_tracking() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

pub fn live_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Restarts peak tracking from the current live size and returns it.
pub fn reset_peak() -> usize {
    let now = CURRENT.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    now
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Resident set size in bytes from `/proc/self/status`, where available.
pub fn resident_bytes() -> Option<u64> {
    let s = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = s.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Fsd,
    Dense,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Fsd => "fsd",
            Pipeline::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub pipeline: Pipeline,
    pub range_m: f64,
    pub scene_id: String,
    pub points: usize,
    /// Occupied voxels for the sparse pipeline, grid cells for the dense one.
    pub units: usize,
    /// Median per-call latency.
    pub latency_ms: f64,
    pub samples_ms: Vec<f64>,
    /// Calls timed together per sample; above 1 when one call is shorter
    /// than the timer floor.
    pub calls_per_sample: usize,
    /// Peak heap growth over one call.
    pub peak_alloc_mb: f64,
    /// Largest resident set sampled around the calls.
    pub rss_mb: Option<f64>,
    pub detections: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Exponents {
    pub latency: Option<f64>,
    pub memory: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub point_budget: usize,
    pub ranges: Vec<f64>,
    pub repeats: usize,
    pub threads: usize,
    pub alloc_tracking: bool,
    pub rows: Vec<BenchRow>,
    pub fsd: Exponents,
    pub dense: Exponents,
    pub notes: Vec<String>,
}

impl BenchReport {
    pub fn exponents(&self, p: Pipeline) -> &Exponents {
        match p {
            Pipeline::Fsd => &self.fsd,
            Pipeline::Dense => &self.dense,
        }
    }

    pub fn rows_for(&self, p: Pipeline) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.pipeline == p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per range, pipeline and metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pipeline,range_m,metric,value,config_hash\n");
        for r in &self.rows {
            let mut metrics = vec![
                ("latency_ms", r.latency_ms),
                ("peak_alloc_mb", r.peak_alloc_mb),
                ("points", r.points as f64),
                ("units", r.units as f64),
            ];
            if let Some(rss) = r.rss_mb {
                metrics.push(("rss_mb", rss));
            }
            for (m, v) in metrics {
                out.push_str(&format!(
                    "{},{},{m},{v},{}\n",
                    r.pipeline.name(),
                    r.range_m,
                    self.config_hash
                ));
            }
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`. `None` with fewer than two
/// points or any non-positive value.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// One scene per range with the same point budget, seeded from the run seed.
pub fn bench_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    let mut d = cfg.data.clone();
    d.point_budget = cfg.bench.point_budget;
    cfg.bench
        .ranges
        .iter()
        .enumerate()
        .map(|(i, &r)| generate(&d, r, scene_seed(cfg.seed, "bench", i), format!("bench_{i:02}_{r}m")))
        .collect()
}

struct Measured {
    median_ms: f64,
    samples: Vec<f64>,
    calls: usize,
    peak_bytes: usize,
    rss: Option<u64>,
}

fn measure<T>(repeats: usize, min_sample_ms: f64, mut call: impl FnMut() -> Result<T>) -> Result<(Measured, T)> {
    let rss_before = resident_bytes();
    let base = reset_peak();
    let out = call()?;
    let peak_bytes = peak_bytes().saturating_sub(base);
    let mut rss = rss_before.max(resident_bytes());

    let mut calls = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..calls {
            call()?;
        }
        let ms = t.elapsed().as_secs_f64() * 1e3;
        if ms >= min_sample_ms || calls >= 1 << 20 {
            break;
        }
        calls *= 2;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        for _ in 0..calls {
            call()?;
        }
        samples.push(t.elapsed().as_secs_f64() * 1e3 / calls as f64);
        rss = rss.max(resident_bytes());
    }
    Ok((
        Measured {
            median_ms: median(&samples),
            samples,
            calls,
            peak_bytes,
            rss,
        },
        out,
    ))
}

/// Times both pipelines on `scenes`, which must be ordered by range.
pub fn run_scaling_bench(
    cfg: &RunConfig,
    fsd: &FsdModel,
    dense: &DenseBaseline,
    scenes: &[Scene],
) -> Result<BenchReport> {
    if scenes.is_empty() {
        return Err(FsdError::contract("scaling bench needs at least one scene"));
    }
    if scenes.windows(2).any(|w| w[1].range_m <= w[0].range_m) {
        return Err(FsdError::contract("bench scenes must have strictly increasing ranges"));
    }
    let mb = |b: f64| b / (1024.0 * 1024.0);
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for scene in scenes {
        let (m, dets) = measure(cfg.bench.repeats, cfg.bench.min_sample_ms, || {
            fsd.infer_detailed(&scene.pc)
        })?;
        rows.push(BenchRow {
            pipeline: Pipeline::Fsd,
            range_m: scene.range_m,
            scene_id: scene.id.clone(),
            points: scene.pc.len(),
            units: dets.stats.voxels,
            latency_ms: m.median_ms,
            samples_ms: m.samples,
            calls_per_sample: m.calls,
            peak_alloc_mb: mb(m.peak_bytes as f64),
            rss_mb: m.rss.map(|b| mb(b as f64)),
            detections: dets.detections.len(),
        });
        if m.calls > 1 {
            notes.push(format!(
                "fsd at {} m: one call is under {} ms, timed {} calls per sample",
                scene.range_m, cfg.bench.min_sample_ms, m.calls
            ));
        }

        let grid = BevGrid::new(scene.range_m, cfg.dense.cell_size)?;
        let (m, dets) = measure(cfg.bench.repeats, cfg.bench.min_sample_ms, || {
            dense.infer(&scene.pc, scene.range_m)
        })?;
        rows.push(BenchRow {
            pipeline: Pipeline::Dense,
            range_m: scene.range_m,
            scene_id: scene.id.clone(),
            points: scene.pc.len(),
            units: grid.cells(),
            latency_ms: m.median_ms,
            samples_ms: m.samples,
            calls_per_sample: m.calls,
            peak_alloc_mb: mb(m.peak_bytes as f64),
            rss_mb: m.rss.map(|b| mb(b as f64)),
            detections: dets.len(),
        });
        if m.calls > 1 {
            notes.push(format!(
                "dense at {} m: one call is under {} ms, timed {} calls per sample",
                scene.range_m, cfg.bench.min_sample_ms, m.calls
            ));
        }
    }
    let tracking = alloc_tracking();
    if !tracking {
        notes.push("counting allocator not installed; peak_alloc_mb is not measured".into());
    }
    let fit = |p: Pipeline| {
        let rs: Vec<&BenchRow> = rows.iter().filter(|r| r.pipeline == p).collect();
        let x: Vec<f64> = rs.iter().map(|r| r.range_m).collect();
        let lat: Vec<f64> = rs.iter().map(|r| r.latency_ms).collect();
        let mem: Vec<f64> = rs.iter().map(|r| r.peak_alloc_mb).collect();
        Exponents {
            latency: loglog_slope(&x, &lat),
            memory: if tracking { loglog_slope(&x, &mem) } else { None },
        }
    };
    Ok(BenchReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        code_version: CODE_VERSION.to_string(),
        point_budget: cfg.bench.point_budget,
        ranges: scenes.iter().map(|s| s.range_m).collect(),
        repeats: cfg.bench.repeats,
        threads: 1,
        alloc_tracking: tracking,
        fsd: fit(Pipeline::Fsd),
        dense: fit(Pipeline::Dense),
        rows,
        notes,
    })
}
