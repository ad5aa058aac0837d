//! Output-stationary SySMT array: im2col lowering, NB-SMT GEMM and the
//! analytic cycle model.
//!
//! Every output element `(m, n)` owns one processing element for the
//! duration of its dot product. With `T` threads the K-long reduction is
//! walked `T` indices per cycle: cycle `c` feeds thread `i` with K-index
//! `c*T + i`; indices past K are idle threads.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Conv2d, Layer, LayerGraph};
use crate::par::{self, Parallelism};
use crate::squeeze::{reduce_activation, reduce_weight, squeeze_cycle, ThreadCount};

/// Rows and columns of the processing-element grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self { rows: 32, cols: 32 }
    }
}

impl FromStr for ArrayConfig {
    type Err = Error;

    /// Parses `RxC`, e.g. `32x32`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("array size must look like 32x32, got '{s}'"));
        let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let rows: usize = r.trim().parse().map_err(|_| bad())?;
        let cols: usize = c.trim().parse().map_err(|_| bad())?;
        if rows == 0 || cols == 0 {
            return Err(bad());
        }
        Ok(Self { rows, cols })
    }
}

/// Thread capacity per layer. Layers without an override use `default`;
/// exempt layers always run at one thread.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThreadConfig {
    pub default: ThreadCount,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, ThreadCount>,
}

impl ThreadConfig {
    pub fn uniform(t: ThreadCount) -> Self {
        Self {
            default: t,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with(mut self, layer: impl Into<String>, t: ThreadCount) -> Self {
        self.overrides.insert(layer.into(), t);
        self
    }

    pub fn threads_for(&self, layer: &Layer) -> ThreadCount {
        if !layer.is_nbsmt_eligible() {
            return ThreadCount::One;
        }
        self.overrides
            .get(&layer.name)
            .copied()
            .unwrap_or(self.default)
    }

    /// Explicit per-layer thread counts over the graph's eligible layers.
    pub fn resolve(&self, graph: &LayerGraph) -> BTreeMap<String, ThreadCount> {
        graph
            .eligible_layers()
            .map(|l| (l.name.clone(), self.threads_for(l)))
            .collect()
    }

    /// Rejects overrides naming layers the graph cannot accelerate.
    pub fn check(&self, graph: &LayerGraph) -> Result<()> {
        for name in self.overrides.keys() {
            match graph.layer_index(name) {
                Some(i) if graph.layers[i].is_nbsmt_eligible() => {}
                Some(_) => {
                    return Err(Error::InvalidArgument(format!(
                        "layer {name} is NB-SMT exempt or not a convolution"
                    )))
                }
                None => return Err(Error::InvalidArgument(format!("no layer named {name}"))),
            }
        }
        Ok(())
    }

    /// Compact label such as `conv2=4T,conv3=2T`.
    pub fn label(&self, graph: &LayerGraph) -> String {
        let parts: Vec<String> = self
            .resolve(graph)
            .iter()
            .map(|(n, t)| format!("{n}={t}"))
            .collect();
        parts.join(",")
    }

    /// Parses `conv2=2,conv3=1T` style overrides on top of `default`.
    pub fn parse_overrides(default: ThreadCount, spec: &str) -> Result<Self> {
        let mut cfg = Self::uniform(default);
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, t) = part.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("expected layer=threads, got '{part}'"))
            })?;
            cfg.overrides.insert(name.trim().to_string(), t.parse()?);
        }
        Ok(cfg)
    }
}

impl fmt::Display for ThreadConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.default)?;
        for (n, t) in &self.overrides {
            write!(f, ",{n}={t}")?;
        }
        Ok(())
    }
}

/// Row-major `m x k` activation quanta and `n x k` weight quanta (weights
/// are stored transposed so each output's operands are contiguous).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GemmOperands {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a: Vec<u8>,
    pub w: Vec<i8>,
}

impl GemmOperands {
    pub fn new(m: usize, k: usize, n: usize, a: Vec<u8>, w: Vec<i8>) -> Result<Self> {
        if a.len() != m * k || w.len() != n * k {
            return Err(Error::InvalidArgument(format!(
                "gemm operands {}/{} do not match {m}x{k}x{n}",
                a.len(),
                w.len()
            )));
        }
        if w.contains(&i8::MIN) {
            return Err(Error::InvalidArgument(
                "weight quantum -128 is outside the symmetric range".into(),
            ));
        }
        Ok(Self { m, k, n, a, w })
    }
}

/// Raw counters from one NB-SMT GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GemmStats {
    pub mac_count: u64,
    /// Processing-element cycles: one per output per reduction step.
    pub pe_cycles: u64,
    pub collision_cycles: u64,
    /// Sum over threads of |squeezed product - exact product|.
    pub abs_error_sum: u64,
}

impl GemmStats {
    fn merge(self, o: GemmStats) -> GemmStats {
        GemmStats {
            mac_count: self.mac_count + o.mac_count,
            pe_cycles: self.pe_cycles + o.pe_cycles,
            collision_cycles: self.collision_cycles + o.collision_cycles,
            abs_error_sum: self.abs_error_sum + o.abs_error_sum,
        }
    }
}

/// Lowers one batch of quantized NCHW activations for `conv`.
///
/// Rows are `(image, oy, ox)`; columns follow the weight layout
/// `(cin, ky, kx)`. Padding cells take the value `pad`, the activation
/// zero-point, so they dequantize to exactly zero.
pub fn im2col_lower(
    conv: &Conv2d,
    input: &[u8],
    batch: usize,
    in_hw: (usize, usize),
    pad: u8,
) -> Result<(Vec<u8>, usize, usize)> {
    let (h, w) = in_hw;
    let cin = conv.in_channels();
    if input.len() != batch * cin * h * w {
        return Err(Error::InvalidArgument(format!(
            "im2col input has {} elements, expected {batch}x{cin}x{h}x{w}",
            input.len()
        )));
    }
    let (oh, ow) = conv
        .output_hw(h, w)
        .ok_or_else(|| Error::InvalidArgument(format!("kernel does not fit {h}x{w}")))?;
    let (kh, kw) = conv.kernel();
    let k = cin * kh * kw;
    let m = batch * oh * ow;
    let (s, p) = (conv.stride as isize, conv.padding as isize);
    let mut out = vec![pad; m * k];
    for b in 0..batch {
        let img = &input[b * cin * h * w..(b + 1) * cin * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut out[((b * oh + oy) * ow + ox) * k..][..k];
                let mut col = 0;
                for c in 0..cin {
                    let plane = &img[c * h * w..(c + 1) * h * w];
                    for ky in 0..kh {
                        let iy = oy as isize * s + ky as isize - p;
                        for kx in 0..kw {
                            let ix = ox as isize * s + kx as isize - p;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                row[col] = plane[iy as usize * w + ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((out, m, k))
}

const ROW_CHUNK: usize = 64;

/// Plain integer GEMM, `out[m][n] = sum_k a[m][k] * w[n][k]`.
pub fn reference_gemm(ops: &GemmOperands, par: Parallelism) -> Vec<i32> {
    let n = ops.n;
    let mut out = vec![0i32; ops.m * n];
    if ops.k == 0 || n == 0 {
        return out;
    }
    par::chunks_mut_reduce(
        &mut out,
        ROW_CHUNK * n,
        par,
        (),
        |chunk_idx, chunk| {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: AVX2 support was just checked.
                return unsafe { reference_rows_avx2(ops, chunk_idx * ROW_CHUNK, chunk) };
            }
            reference_rows(ops, chunk_idx * ROW_CHUNK, chunk)
        },
        |_, _| (),
    );
    out
}

#[inline(always)]
fn reference_rows(ops: &GemmOperands, row0: usize, chunk: &mut [i32]) {
    let (k, n) = (ops.k, ops.n);
    for (r, out_row) in chunk.chunks_mut(n).enumerate() {
        let a_row = &ops.a[(row0 + r) * k..][..k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let w_row = &ops.w[j * k..][..k];
            *o = a_row
                .iter()
                .zip(w_row)
                .fold(0i32, |acc, (&x, &y)| acc.wrapping_add(x as i32 * y as i32));
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn reference_rows_avx2(ops: &GemmOperands, row0: usize, chunk: &mut [i32]) {
    reference_rows(ops, row0, chunk)
}

// Largest |product| is 255 * 127; also bounds squeezed products (240 * 128).
const MAX_ABS_PRODUCT: u64 = 255 * 128;

/// Outputs handled together by the NB-SMT kernel.
const LANES: usize = 16;

/// Weights regrouped as `[block][k][lane]`, `LANES` outputs per block, with
/// their 4-bit reductions alongside. Missing outputs get zero weights, which
/// are inactive and contribute nothing.
struct WeightPanels {
    blocks: usize,
    k: usize,
    w: Vec<i32>,
    rw: Vec<i32>,
}

impl WeightPanels {
    fn new(ops: &GemmOperands) -> Self {
        let (k, n) = (ops.k, ops.n);
        let blocks = n.div_ceil(LANES);
        let mut w = vec![0i32; blocks * k * LANES];
        let mut rw = vec![0i32; blocks * k * LANES];
        for j in 0..n {
            let (b, l) = (j / LANES, j % LANES);
            for (kk, &x) in ops.w[j * k..][..k].iter().enumerate() {
                let at = (b * k + kk) * LANES + l;
                w[at] = x as i32;
                rw[at] = reduce_weight(x);
            }
        }
        Self { blocks, k, w, rw }
    }
}

/// Nonzero activations of one PE cycle. A zero activation leaves its thread
/// idle for every output, so only these can collide.
#[derive(Clone, Copy)]
struct CycleSlots<const T: usize> {
    len: usize,
    k: [usize; T],
    a: [i32; T],
    ra: [i32; T],
}

fn row_slots<const T: usize>(a_row: &[u8], out: &mut Vec<CycleSlots<T>>) {
    out.clear();
    for (c, chunk) in a_row.chunks(T).enumerate() {
        let mut s = CycleSlots { len: 0, k: [0; T], a: [0; T], ra: [0; T] };
        for (t, &x) in chunk.iter().enumerate() {
            if x != 0 {
                s.k[s.len] = c * T + t;
                s.a[s.len] = x as i32;
                s.ra[s.len] = reduce_activation(x);
                s.len += 1;
            }
        }
        if s.len > 0 {
            out.push(s);
        }
    }
}

/// Accumulates one activation row against one weight block, cycle by cycle,
/// applying the squeeze rule independently in every lane.
#[inline(always)]
fn nbsmt_block<const T: usize>(
    slots: &[CycleSlots<T>],
    w: &[i32],
    rw: &[i32],
    acc: &mut [i32; LANES],
    collisions: &mut [u32; LANES],
    err: &mut [u32; LANES],
) {
    for s in slots {
        if s.len == 1 {
            let (a, wk) = (s.a[0], &w[s.k[0] * LANES..][..LANES]);
            for l in 0..LANES {
                acc[l] = acc[l].wrapping_add(a.wrapping_mul(wk[l]));
            }
            continue;
        }
        let mut cnt = [0i32; LANES];
        let mut exact = [0i32; LANES];
        let mut one = [0i32; LANES];
        let mut both = [0i32; LANES];
        let mut one_err = [0i32; LANES];
        let mut both_err = [0i32; LANES];
        for i in 0..s.len {
            let (a, ra) = (s.a[i], s.ra[i]);
            let wk = &w[s.k[i] * LANES..][..LANES];
            let rwk = &rw[s.k[i] * LANES..][..LANES];
            for l in 0..LANES {
                let p = a.wrapping_mul(wk[l]);
                let r = ra.wrapping_mul(rwk[l]);
                let pa = ra.wrapping_mul(wk[l]);
                let pw = a.wrapping_mul(rwk[l]);
                let (ea, ew) = (pa.wrapping_sub(p).wrapping_abs(), pw.wrapping_sub(p).wrapping_abs());
                // Equal errors reduce the activation.
                let (q, e) = if ea <= ew { (pa, ea) } else { (pw, ew) };
                cnt[l] = cnt[l].wrapping_add((wk[l] != 0) as i32);
                exact[l] = exact[l].wrapping_add(p);
                one[l] = one[l].wrapping_add(q);
                one_err[l] = one_err[l].wrapping_add(e);
                both[l] = both[l].wrapping_add(r);
                both_err[l] = both_err[l].wrapping_add(r.wrapping_sub(p).wrapping_abs());
            }
        }
        for l in 0..LANES {
            let (v, e) = match cnt[l] {
                0 | 1 => (exact[l], 0),
                2 => (one[l], one_err[l]),
                _ => (both[l], both_err[l]),
            };
            acc[l] = acc[l].wrapping_add(v);
            err[l] = err[l].wrapping_add(e as u32);
            collisions[l] = collisions[l].wrapping_add((cnt[l] >= 2) as u32);
        }
    }
}

#[inline(always)]
fn nbsmt_rows<const T: usize>(
    ops: &GemmOperands,
    panels: &WeightPanels,
    row0: usize,
    chunk: &mut [i32],
    st: &mut GemmStats,
) {
    let (k, n) = (ops.k, ops.n);
    let mut slots = Vec::with_capacity(k.div_ceil(T));
    for (r, out_row) in chunk.chunks_mut(n).enumerate() {
        row_slots::<T>(&ops.a[(row0 + r) * k..][..k], &mut slots);
        for b in 0..panels.blocks {
            let mut acc = [0i32; LANES];
            let mut coll = [0u32; LANES];
            let mut err = [0u32; LANES];
            let span = panels.k * LANES;
            nbsmt_block::<T>(
                &slots,
                &panels.w[b * span..][..span],
                &panels.rw[b * span..][..span],
                &mut acc,
                &mut coll,
                &mut err,
            );
            let lo = b * LANES;
            let hi = (lo + LANES).min(n);
            out_row[lo..hi].copy_from_slice(&acc[..hi - lo]);
            st.collision_cycles += coll.iter().map(|&x| x as u64).sum::<u64>();
            st.abs_error_sum += err.iter().map(|&x| x as u64).sum::<u64>();
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn nbsmt_rows_avx2<const T: usize>(
    ops: &GemmOperands,
    panels: &WeightPanels,
    row0: usize,
    chunk: &mut [i32],
    st: &mut GemmStats,
) {
    nbsmt_rows::<T>(ops, panels, row0, chunk, st)
}

/// Picks the widest kernel build the CPU supports; all builds agree exactly.
fn nbsmt_rows_dispatch<const T: usize>(
    ops: &GemmOperands,
    panels: &WeightPanels,
    row0: usize,
    chunk: &mut [i32],
    st: &mut GemmStats,
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just checked.
        return unsafe { nbsmt_rows_avx2::<T>(ops, panels, row0, chunk, st) };
    }
    nbsmt_rows::<T>(ops, panels, row0, chunk, st)
}

/// Runs the GEMM on NB-SMT processing elements with `threads` threads each.
///
/// At one thread the result equals [`reference_gemm`] bit for bit. An
/// accumulator leaving the 32-bit range is an error, never a wraparound.
pub fn nbsmt_gemm(
    ops: &GemmOperands,
    threads: ThreadCount,
    par: Parallelism,
) -> Result<(Vec<i32>, GemmStats)> {
    let (m, k, n) = (ops.m, ops.k, ops.n);
    let steps = k.div_ceil(threads.get()) as u64;
    let counters = GemmStats {
        mac_count: (m * k * n) as u64,
        pe_cycles: steps * (m * n) as u64,
        ..Default::default()
    };
    if n == 0 || m == 0 {
        return Ok((vec![0; m * n], counters));
    }
    if (k as u64) * MAX_ABS_PRODUCT > i32::MAX as u64 {
        return checked_gemm(ops, threads, par, counters);
    }
    if threads == ThreadCount::One {
        return Ok((reference_gemm(ops, par), counters));
    }
    let panels = WeightPanels::new(ops);
    let mut out = vec![0i32; m * n];
    let st = par::chunks_mut_reduce(
        &mut out,
        ROW_CHUNK * n,
        par,
        GemmStats::default(),
        |chunk_idx, chunk| {
            let mut st = GemmStats::default();
            match threads {
                ThreadCount::Two => nbsmt_rows_dispatch::<2>(ops, &panels, chunk_idx * ROW_CHUNK, chunk, &mut st),
                _ => nbsmt_rows_dispatch::<4>(ops, &panels, chunk_idx * ROW_CHUNK, chunk, &mut st),
            }
            st
        },
        GemmStats::merge,
    );
    Ok((out, counters.merge(st)))
}

/// Long reductions: every output replayed with a checked 32-bit accumulator.
fn checked_gemm(
    ops: &GemmOperands,
    threads: ThreadCount,
    par: Parallelism,
    counters: GemmStats,
) -> Result<(Vec<i32>, GemmStats)> {
    let (k, n) = (ops.k, ops.n);
    let mut out = vec![0i32; ops.m * n];
    let (st, overflowed) = par::chunks_mut_reduce(
        &mut out,
        ROW_CHUNK * n,
        par,
        (GemmStats::default(), false),
        |chunk_idx, chunk| {
            let mut st = GemmStats::default();
            let mut overflow = false;
            for (r, out_row) in chunk.chunks_mut(n).enumerate() {
                let a_row = &ops.a[(chunk_idx * ROW_CHUNK + r) * k..][..k];
                for (j, o) in out_row.iter_mut().enumerate() {
                    match checked_dot(a_row, &ops.w[j * k..][..k], threads, &mut st) {
                        Some(v) => *o = v,
                        None => overflow = true,
                    }
                }
            }
            (st, overflow)
        },
        |(a, oa), (b, ob)| (a.merge(b), oa || ob),
    );
    if overflowed {
        return Err(Error::Overflow("nbsmt_gemm".into()));
    }
    Ok((out, counters.merge(st)))
}

/// One dot product, cycle by cycle, with a checked 32-bit accumulator.
fn checked_dot(a: &[u8], w: &[i8], threads: ThreadCount, stats: &mut GemmStats) -> Option<i32> {
    let t = threads.get();
    let mut acc: i32 = 0;
    for c in 0..a.len().div_ceil(t) {
        let lo = c * t;
        let hi = (lo + t).min(a.len());
        let mut aa = [0u8; 4];
        let mut ww = [0i8; 4];
        aa[..hi - lo].copy_from_slice(&a[lo..hi]);
        ww[..hi - lo].copy_from_slice(&w[lo..hi]);
        let (v, e, act) = match threads {
            ThreadCount::One => (aa[0] as i32 * ww[0] as i32, 0, 0),
            ThreadCount::Two => squeeze_cycle::<2>(&[aa[0], aa[1]], &[ww[0], ww[1]]),
            ThreadCount::Four => squeeze_cycle::<4>(&aa, &ww),
        };
        stats.abs_error_sum += e as u64;
        stats.collision_cycles += (act >= 2) as u64;
        acc = acc.checked_add(v)?;
    }
    Some(acc)
}

/// Array cycles for an `m x k x n` GEMM: output tiles times reduction steps.
/// Pipeline fill and drain are not modeled.
pub fn layer_cycles(m: usize, k: usize, n: usize, array: ArrayConfig, threads: ThreadCount) -> u64 {
    (m.div_ceil(array.rows) * n.div_ceil(array.cols) * k.div_ceil(threads.get())) as u64
}

/// Per-layer counters; sums over every GEMM the layer ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCycles {
    pub name: String,
    pub threads: ThreadCount,
    pub exempt: bool,
    pub mac_count: u64,
    pub cycles: u64,
    /// The same work at one thread.
    pub baseline_cycles: u64,
    pub pe_cycles: u64,
    pub collision_cycles: u64,
    pub collision_rate: f64,
    pub mean_abs_squeeze_error: f64,
    #[serde(skip)]
    pub abs_error_sum: u64,
}

impl LayerCycles {
    pub fn new(name: &str, threads: ThreadCount, exempt: bool) -> Self {
        Self {
            name: name.to_string(),
            threads,
            exempt,
            mac_count: 0,
            cycles: 0,
            baseline_cycles: 0,
            pe_cycles: 0,
            collision_cycles: 0,
            collision_rate: 0.0,
            mean_abs_squeeze_error: 0.0,
            abs_error_sum: 0,
        }
    }

    /// Adds one GEMM's work.
    pub fn record(&mut self, m: usize, k: usize, n: usize, array: ArrayConfig, stats: &GemmStats) {
        self.mac_count += (m * k * n) as u64;
        self.cycles += layer_cycles(m, k, n, array, self.threads);
        self.baseline_cycles += layer_cycles(m, k, n, array, ThreadCount::One);
        self.pe_cycles += (m * n * k.div_ceil(self.threads.get())) as u64;
        self.collision_cycles += stats.collision_cycles;
        self.abs_error_sum += stats.abs_error_sum;
        self.refresh();
    }

    fn refresh(&mut self) {
        self.collision_rate = ratio(self.collision_cycles, self.pe_cycles);
        self.mean_abs_squeeze_error = ratio(self.abs_error_sum, self.mac_count);
    }

    fn absorb(&mut self, o: &LayerCycles) {
        self.mac_count += o.mac_count;
        self.cycles += o.cycles;
        self.baseline_cycles += o.baseline_cycles;
        self.pe_cycles += o.pe_cycles;
        self.collision_cycles += o.collision_cycles;
        self.abs_error_sum += o.abs_error_sum;
        self.refresh();
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Cycle accounting for every GEMM layer of a forward pass, in graph order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CycleReport {
    pub layers: Vec<LayerCycles>,
}

impl CycleReport {
    pub fn layer(&self, name: &str) -> Option<&LayerCycles> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str, threads: ThreadCount, exempt: bool) -> &mut LayerCycles {
        match self.layers.iter().position(|l| l.name == name) {
            Some(i) => &mut self.layers[i],
            None => {
                self.layers.push(LayerCycles::new(name, threads, exempt));
                self.layers.last_mut().unwrap()
            }
        }
    }

    /// Sums another report (same graph) into this one.
    pub fn merge(&mut self, other: &CycleReport) {
        for l in &other.layers {
            self.layer_mut(&l.name, l.threads, l.exempt).absorb(l);
        }
    }

    pub fn total_cycles(&self) -> u64 {
        self.layers.iter().map(|l| l.cycles).sum()
    }

    pub fn total_baseline_cycles(&self) -> u64 {
        self.layers.iter().map(|l| l.baseline_cycles).sum()
    }

    /// Speedup against the same work at one thread everywhere.
    pub fn speedup(&self) -> f64 {
        speedup(self, None)
    }

    /// Collision rate over all NB-SMT accelerated PE cycles.
    pub fn mean_collision_rate(&self) -> f64 {
        let (c, p) = self
            .layers
            .iter()
            .filter(|l| l.threads != ThreadCount::One)
            .fold((0, 0), |(c, p), l| (c + l.collision_cycles, p + l.pe_cycles));
        ratio(c, p)
    }
}

/// Baseline cycles over configured cycles. Exempt layers are counted at one
/// thread in both sums. With no explicit baseline report, each layer's own
/// one-thread cycle count is used.
pub fn speedup(configured: &CycleReport, baseline: Option<&CycleReport>) -> f64 {
    let base = match baseline {
        Some(b) => b.total_cycles(),
        None => configured.total_baseline_cycles(),
    };
    let cfg = configured.total_cycles();
    if cfg == 0 {
        1.0
    } else {
        base as f64 / cfg as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv(o: usize, i: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> Conv2d {
        Conv2d {
            weight: Tensor::zeros(vec![o, i, kh, kw]),
            bias: vec![0.0; o],
            stride,
            padding,
        }
    }

    fn random_ops(rng: &mut ChaCha8Rng, m: usize, k: usize, n: usize, density: f64) -> GemmOperands {
        let a = (0..m * k)
            .map(|_| if rng.random_bool(density) { rng.random() } else { 0 })
            .collect();
        let w = (0..n * k)
            .map(|_| {
                if rng.random_bool(density) {
                    rng.random_range(-127..=127)
                } else {
                    0
                }
            })
            .collect();
        GemmOperands::new(m, k, n, a, w).unwrap()
    }

    #[test]
    fn pointwise_conv_is_reshape() {
        let c = conv(4, 3, 1, 1, 1, 0);
        let input: Vec<u8> = (0..3 * 2 * 2).map(|x| x as u8).collect();
        let (cols, m, k) = im2col_lower(&c, &input, 1, (2, 2), 0).unwrap();
        assert_eq!((m, k), (4, 3));
        // Row (pixel p) holds channel values p, 4+p, 8+p.
        assert_eq!(&cols[..3], &[0, 4, 8]);
        assert_eq!(&cols[9..12], &[3, 7, 11]);
    }

    #[test]
    fn padded_3x3_dimensions_and_padding_value() {
        let c = conv(8, 2, 3, 3, 1, 1);
        let input = vec![9u8; 2 * 28 * 28];
        let (cols, m, k) = im2col_lower(&c, &input, 1, (28, 28), 5).unwrap();
        assert_eq!((m, k), (784, 18));
        // Top-left output: first row and column of each 3x3 window are padding.
        assert_eq!(&cols[..9], &[5, 5, 5, 5, 9, 9, 5, 9, 9]);
        assert!(im2col_lower(&c, &input[1..], 1, (28, 28), 0).is_err());
    }

    #[test]
    fn padding_cells_are_inactive_threads() {
        let c = conv(1, 1, 3, 3, 1, 1);
        let (cols, m, k) = im2col_lower(&c, &[1u8; 9], 1, (3, 3), 0).unwrap();
        let w = vec![1i8; 9];
        let ops = GemmOperands::new(m, k, 1, cols, w).unwrap();
        let (out, _) = nbsmt_gemm(&ops, ThreadCount::One, Parallelism::Sequential).unwrap();
        assert_eq!(out, [4, 6, 4, 6, 9, 6, 4, 6, 4]);
    }

    #[test]
    fn all_active_two_threads_collide_every_cycle() {
        let ops = GemmOperands::new(3, 8, 2, vec![17; 24], vec![-33; 16]).unwrap();
        let (_, st) = nbsmt_gemm(&ops, ThreadCount::Two, Parallelism::Sequential).unwrap();
        assert_eq!(st.pe_cycles, 3 * 2 * 4);
        assert_eq!(st.collision_cycles, st.pe_cycles);
    }

    #[test]
    fn zero_activations_give_zero_and_no_collisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ops = random_ops(&mut rng, 5, 13, 4, 1.0);
        ops.a.iter_mut().for_each(|x| *x = 0);
        for t in ThreadCount::ALL {
            let (out, st) = nbsmt_gemm(&ops, t, Parallelism::Sequential).unwrap();
            assert!(out.iter().all(|&v| v == 0));
            assert_eq!(st.collision_cycles, 0);
            assert_eq!(st.abs_error_sum, 0);
        }
    }

    #[test]
    fn cycle_formula() {
        let arr = ArrayConfig::default();
        assert_eq!(layer_cycles(64, 90, 100, arr, ThreadCount::Two), 360);
        assert_eq!(layer_cycles(64, 90, 100, arr, ThreadCount::One), 720);
        for t in ThreadCount::ALL {
            assert_eq!(layer_cycles(40, 1, 40, arr, t), 4);
        }
    }

    #[test]
    fn speedup_examples() {
        let arr = ArrayConfig { rows: 4, cols: 4 };
        let st = GemmStats::default();
        let mut r = CycleReport::default();
        r.layer_mut("a", ThreadCount::One, true).record(4, 64, 4, arr, &st);
        r.layer_mut("b", ThreadCount::Four, false).record(4, 64, 4, arr, &st);
        assert!((r.speedup() - 1.6).abs() < 1e-12);

        let mut base = CycleReport::default();
        base.layer_mut("a", ThreadCount::One, true).record(4, 64, 4, arr, &st);
        base.layer_mut("b", ThreadCount::One, false).record(4, 64, 4, arr, &st);
        assert_eq!(base.speedup(), 1.0);
        assert!((speedup(&r, Some(&base)) - 1.6).abs() < 1e-12);
    }

    #[test]
    fn merge_sums_counters() {
        let arr = ArrayConfig::default();
        let st = GemmStats {
            collision_cycles: 10,
            abs_error_sum: 6,
            ..Default::default()
        };
        let mut a = CycleReport::default();
        a.layer_mut("x", ThreadCount::Two, false).record(10, 10, 10, arr, &st);
        let mut b = a.clone();
        b.merge(&a);
        let l = b.layer("x").unwrap();
        assert_eq!(l.collision_cycles, 20);
        assert_eq!(l.mac_count, 2000);
        assert!((l.collision_rate - 20.0 / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn thread_config_parsing() {
        let c = ThreadConfig::parse_overrides(ThreadCount::Four, "conv2=2,conv3=1T").unwrap();
        assert_eq!(c.overrides["conv2"], ThreadCount::Two);
        assert_eq!(c.overrides["conv3"], ThreadCount::One);
        assert!(ThreadConfig::parse_overrides(ThreadCount::Four, "conv2").is_err());
        assert_eq!("16x8".parse::<ArrayConfig>().unwrap(), ArrayConfig { rows: 16, cols: 8 });
    }

    #[test]
    fn collision_rate_falls_with_sparsity() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut prev = f64::INFINITY;
        for density in [0.9, 0.7, 0.5, 0.3, 0.1] {
            let ops = random_ops(&mut rng, 64, 72, 16, density);
            let (_, st) = nbsmt_gemm(&ops, ThreadCount::Four, Parallelism::Sequential).unwrap();
            let rate = st.collision_cycles as f64 / st.pe_cycles as f64;
            assert!(rate <= prev, "density {density}: {rate} > {prev}");
            prev = rate;
        }
    }

    #[test]
    fn overflow_is_an_error() {
        // 255 * 127 * 70000 exceeds i32::MAX.
        let k = 70_000;
        let ops = GemmOperands::new(1, k, 1, vec![255; k], vec![127; k]).unwrap();
        assert!(matches!(
            nbsmt_gemm(&ops, ThreadCount::One, Parallelism::Sequential),
            Err(Error::Overflow(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn one_thread_equals_reference(seed in any::<u64>(), m in 1usize..20, k in 1usize..40, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ops = random_ops(&mut rng, m, k, n, 0.6);
            let (out, st) = nbsmt_gemm(&ops, ThreadCount::One, Parallelism::Sequential).unwrap();
            prop_assert_eq!(&out, &reference_gemm(&ops, Parallelism::Sequential));
            prop_assert_eq!(st.collision_cycles, 0);
        }

        #[test]
        fn lane_kernel_matches_cycle_replay(seed in any::<u64>(), m in 1usize..6, k in 1usize..70, n in 1usize..40, d in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ops = random_ops(&mut rng, m, k, n, d);
            for t in [ThreadCount::Two, ThreadCount::Four] {
                let (out, st) = nbsmt_gemm(&ops, t, Parallelism::Sequential).unwrap();
                let mut replay = GemmStats::default();
                for i in 0..m {
                    for j in 0..n {
                        let v = checked_dot(&ops.a[i * k..][..k], &ops.w[j * k..][..k], t, &mut replay).unwrap();
                        prop_assert_eq!(out[i * n + j], v);
                    }
                }
                prop_assert_eq!(st.collision_cycles, replay.collision_cycles);
                prop_assert_eq!(st.abs_error_sum, replay.abs_error_sum);
            }
        }

        #[test]
        fn parallel_matches_sequential(seed in any::<u64>(), m in 1usize..200, k in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ops = random_ops(&mut rng, m, k, 7, 0.5);
            for t in ThreadCount::ALL {
                let s = nbsmt_gemm(&ops, t, Parallelism::Sequential).unwrap();
                let p = nbsmt_gemm(&ops, t, Parallelism::Parallel).unwrap();
                prop_assert_eq!(s, p);
            }
        }
    }
}
