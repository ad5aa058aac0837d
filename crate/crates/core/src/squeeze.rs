//! One NB-SMT shared MAC.
//!
//! Up to `T` threads, each an (activation, weight) quantum pair, share one
//! 8-bit multiplier per cycle. A thread is active when its product is
//! nonzero. Cycles with at most one active thread are exact. When threads
//! collide their operands are momentarily cut to 4 bits:
//!
//! | active | per-thread budget (a, w)                              |
//! |--------|-------------------------------------------------------|
//! | 0..=1  | (8, 8)                                                |
//! | 2      | (4, 8) or (8, 4): reduce the operand whose rounding    |
//! |        | error, times the other operand, is smaller; ties cut a |
//! | 3..=4  | (4, 4)                                                |
//!
//! A reduced operand keeps its scale: the 4-bit code `q` stands for `q * 16`.
//! Unsigned codes span `[0, 15]`, signed codes `[-8, 7]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Bits dropped when an operand is squeezed.
pub const REDUCED_SHIFT: u32 = 4;

/// Thread capacity of a shared MAC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ThreadCount {
    One = 1,
    Two = 2,
    Four = 4,
}

impl ThreadCount {
    pub const ALL: [ThreadCount; 3] = [ThreadCount::One, ThreadCount::Two, ThreadCount::Four];

    pub fn get(self) -> usize {
        self as usize
    }

    pub fn from_count(n: usize) -> Option<Self> {
        match n {
            1 => Some(ThreadCount::One),
            2 => Some(ThreadCount::Two),
            4 => Some(ThreadCount::Four),
            _ => None,
        }
    }
}

impl fmt::Display for ThreadCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}T", self.get())
    }
}

impl FromStr for ThreadCount {
    type Err = Error;

    /// Accepts `4`, `4T` or `4t`.
    fn from_str(s: &str) -> Result<Self, Error> {
        let digits = s.trim().trim_end_matches(['T', 't']);
        digits
            .parse::<usize>()
            .ok()
            .and_then(ThreadCount::from_count)
            .ok_or_else(|| Error::InvalidArgument(format!("thread count must be 1T, 2T or 4T, got '{s}'")))
    }
}

impl From<ThreadCount> for String {
    fn from(t: ThreadCount) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for ThreadCount {
    type Error = Error;
    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signedness {
    Unsigned,
    Signed,
}

/// Rounds `x` to a multiple of `2^k` representable in `8 - k` bits.
///
/// Ties go up for unsigned operands and away from zero for signed ones;
/// out-of-range codes clamp. Returns the represented value `q * 2^k`.
pub fn reduce_operand(x: i32, k: u32, signedness: Signedness) -> i32 {
    let half = 1 << (k - 1);
    let bits = 8 - k;
    let q = match signedness {
        Signedness::Unsigned => ((x + half) >> k).clamp(0, (1 << bits) - 1),
        Signedness::Signed => {
            let mag = (x.abs() + half) >> k;
            let q = if x < 0 { -mag } else { mag };
            q.clamp(-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
        }
    };
    q << k
}

const fn build_act_table() -> [i16; 256] {
    let mut t = [0i16; 256];
    let mut x = 0;
    while x < 256 {
        let mut q = (x as i32 + 8) >> 4;
        if q > 15 {
            q = 15;
        }
        t[x] = (q << 4) as i16;
        x += 1;
    }
    t
}

const fn build_weight_table() -> [i16; 256] {
    let mut t = [0i16; 256];
    let mut i = 0;
    while i < 256 {
        let x = i as u8 as i8 as i32;
        let mag = ((if x < 0 { -x } else { x }) + 8) >> 4;
        let mut q = if x < 0 { -mag } else { mag };
        if q > 7 {
            q = 7;
        }
        if q < -8 {
            q = -8;
        }
        t[i] = (q << 4) as i16;
        i += 1;
    }
    t
}

static ACT_REDUCED: [i16; 256] = build_act_table();
static WEIGHT_REDUCED: [i16; 256] = build_weight_table();

/// 4-bit squeezed value of an unsigned activation quantum.
#[inline(always)]
pub fn reduce_activation(a: u8) -> i32 {
    ACT_REDUCED[a as usize] as i32
}

/// 4-bit squeezed value of a signed weight quantum.
#[inline(always)]
pub fn reduce_weight(w: i8) -> i32 {
    WEIGHT_REDUCED[w as u8 as usize] as i32
}

/// One thread's operands for a MAC cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ThreadOperands {
    pub a: u8,
    pub w: i8,
}

impl ThreadOperands {
    pub fn new(a: u8, w: i8) -> Self {
        Self { a, w }
    }

    #[inline(always)]
    pub fn is_active(self) -> bool {
        self.a != 0 && self.w != 0
    }
}

/// Set of active thread indices, as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActiveSet(pub u8);

impl ActiveSet {
    pub fn len(self) -> u32 {
        self.0.count_ones()
    }
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
    pub fn contains(self, i: usize) -> bool {
        self.0 & (1 << i) != 0
    }
    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..8).filter(move |&i| self.contains(i))
    }
}

pub fn active_threads(ops: &[ThreadOperands]) -> ActiveSet {
    ActiveSet(
        ops.iter()
            .enumerate()
            .fold(0u8, |m, (i, t)| if t.is_active() { m | (1 << i) } else { m }),
    )
}

/// Thread capacity plus the fixed reduction schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SqueezePolicy {
    pub threads: ThreadCount,
}

impl SqueezePolicy {
    pub fn new(threads: ThreadCount) -> Self {
        Self { threads }
    }

    /// Per-thread (activation bits, weight bits) for `active` colliding
    /// threads. At two, one operand drops to 4 bits; which one is chosen per
    /// thread by [`mac_cycle`].
    pub fn budget(&self, active: u32) -> (u32, u32) {
        match active {
            0 | 1 => (8, 8),
            2 => (4, 8),
            _ => (4, 4),
        }
    }
}

/// How a thread's operands were treated in one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Exact,
    Activation,
    Weight,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ThreadRecord {
    pub reduction: Reduction,
    /// Squeezed product minus the exact product.
    pub error: i32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacOutcome {
    pub contribution: i32,
    pub exact: i32,
    pub active: ActiveSet,
    pub threads: Vec<ThreadRecord>,
}

/// Product of one thread under the two-thread collision rule.
#[inline(always)]
fn single_reduced(a: u8, w: i8) -> (i32, Reduction) {
    let (ai, wi) = (a as i32, w as i32);
    let ra = reduce_activation(a);
    let rw = reduce_weight(w);
    let err_a = ((ra - ai) * wi).abs();
    let err_w = ((rw - wi) * ai).abs();
    if err_a <= err_w {
        (ra * wi, Reduction::Activation)
    } else {
        (ai * rw, Reduction::Weight)
    }
}

/// Simulates one cycle of a shared MAC. `ops.len()` must equal the policy's
/// thread capacity.
pub fn mac_cycle(ops: &[ThreadOperands], policy: &SqueezePolicy) -> MacOutcome {
    debug_assert_eq!(ops.len(), policy.threads.get());
    let active = active_threads(ops);
    let level = active.len();
    let mut contribution = 0;
    let mut exact = 0;
    let threads = ops
        .iter()
        .map(|t| {
            let p = t.a as i32 * t.w as i32;
            exact += p;
            let (q, reduction) = if !t.is_active() || level <= 1 {
                (p, Reduction::Exact)
            } else if level == 2 {
                single_reduced(t.a, t.w)
            } else {
                (reduce_activation(t.a) * reduce_weight(t.w), Reduction::Both)
            };
            contribution += q;
            ThreadRecord {
                reduction,
                error: q - p,
            }
        })
        .collect();
    MacOutcome {
        contribution,
        exact,
        active,
        threads,
    }
}

/// Hot-loop form of [`mac_cycle`] for a fixed thread count.
///
/// Returns `(contribution, sum of |per-thread error|, active count)`.
#[inline(always)]
pub fn squeeze_cycle<const T: usize>(a: &[u8; T], w: &[i8; T]) -> (i32, u32, u32) {
    let mut active = 0u32;
    let mut exact = 0i32;
    for i in 0..T {
        active += (a[i] != 0 && w[i] != 0) as u32;
        exact += a[i] as i32 * w[i] as i32;
    }
    if active <= 1 {
        return (exact, 0, active);
    }
    let mut sum = 0i32;
    let mut err = 0u32;
    for i in 0..T {
        let p = a[i] as i32 * w[i] as i32;
        // Inactive threads reduce to a zero product either way.
        let q = if active == 2 {
            single_reduced(a[i], w[i]).0
        } else {
            reduce_activation(a[i]) * reduce_weight(w[i])
        };
        sum += q;
        err += (q - p).unsigned_abs();
    }
    (sum, err, active)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ops(pairs: &[(u8, i8)]) -> Vec<ThreadOperands> {
        pairs.iter().map(|&(a, w)| ThreadOperands::new(a, w)).collect()
    }

    #[test]
    fn active_thread_detection() {
        assert_eq!(active_threads(&ops(&[(3, 0), (5, 2)])), ActiveSet(0b10));
        assert_eq!(
            active_threads(&ops(&[(1, 1), (2, -3), (200, 5), (9, -127)])).len(),
            4
        );
        assert!(active_threads(&ops(&[(0, 5), (0, -1), (0, 7), (0, 1)])).is_empty());
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(reduce_operand(0, 4, Signedness::Unsigned), 0);
        assert_eq!(reduce_operand(100, 4, Signedness::Unsigned), 96);
        assert_eq!(reduce_operand(255, 4, Signedness::Unsigned), 240);
        assert_eq!(reduce_operand(-50, 4, Signedness::Signed), -48);
        assert_eq!(reduce_operand(8, 4, Signedness::Unsigned), 16);
        assert_eq!(reduce_operand(-8, 4, Signedness::Signed), -16);
        assert_eq!(reduce_operand(127, 4, Signedness::Signed), 112);
        assert_eq!(reduce_operand(-127, 4, Signedness::Signed), -128);
    }

    #[test]
    fn tables_match_general_reduction() {
        for a in 0..=255u8 {
            assert_eq!(reduce_activation(a), reduce_operand(a as i32, 4, Signedness::Unsigned));
        }
        for w in -128..=127i8 {
            assert_eq!(reduce_weight(w), reduce_operand(w as i32, 4, Signedness::Signed));
        }
    }

    #[test]
    fn two_thread_collision_example() {
        let out = mac_cycle(&ops(&[(100, 3), (7, -50)]), &SqueezePolicy::new(ThreadCount::Two));
        assert_eq!(out.threads[0].reduction, Reduction::Activation);
        assert_eq!(out.threads[1].reduction, Reduction::Weight);
        assert_eq!(out.contribution, 288 - 336);
        assert_eq!(out.exact, -50);
        assert_eq!(out.threads[0].error, -12);
        assert_eq!(out.threads[1].error, 14);
    }

    #[test]
    fn four_thread_collision_reduces_both() {
        let out = mac_cycle(
            &ops(&[(100, 48), (100, 48), (100, 48), (100, 48)]),
            &SqueezePolicy::new(ThreadCount::Four),
        );
        assert_eq!(out.contribution, 4 * 4608);
        assert!(out.threads.iter().all(|t| t.reduction == Reduction::Both));
    }

    #[test]
    fn tie_reduces_activation() {
        // a=8 -> 16 (err 8*w), w=8 -> 16 (err 8*a): equal when a == w.
        let out = mac_cycle(&ops(&[(8, 8), (8, 8)]), &SqueezePolicy::new(ThreadCount::Two));
        assert!(out.threads.iter().all(|t| t.reduction == Reduction::Activation));
    }

    #[test]
    fn budgets() {
        let p = SqueezePolicy::new(ThreadCount::Four);
        assert_eq!(p.budget(0), (8, 8));
        assert_eq!(p.budget(1), (8, 8));
        assert_eq!(p.budget(2), (4, 8));
        assert_eq!(p.budget(3), (4, 4));
        assert_eq!(p.budget(4), (4, 4));
    }

    #[test]
    fn thread_count_parsing() {
        assert_eq!("4T".parse::<ThreadCount>().unwrap(), ThreadCount::Four);
        assert_eq!("2".parse::<ThreadCount>().unwrap(), ThreadCount::Two);
        assert!("3T".parse::<ThreadCount>().is_err());
    }

    fn arb_op() -> impl Strategy<Value = ThreadOperands> {
        (prop_oneof![Just(0u8), any::<u8>()], prop_oneof![Just(0i8), -127i8..=127])
            .prop_map(|(a, w)| ThreadOperands::new(a, w))
    }

    proptest! {
        #[test]
        fn low_bits_zero_is_exact(
            codes in proptest::collection::vec((0i32..16, -7i32..=7), 4),
            level in 1usize..=4,
        ) {
            // Operands on the 16-grid survive reduction unchanged.
            let ops: Vec<_> = codes.iter().map(|&(a, w)| ThreadOperands::new((a * 16) as u8, (w * 16) as i8)).collect();
            let policy = SqueezePolicy::new(if level <= 2 { ThreadCount::Two } else { ThreadCount::Four });
            let ops = &ops[..policy.threads.get()];
            let out = mac_cycle(ops, &policy);
            prop_assert_eq!(out.contribution, out.exact);
        }

        #[test]
        fn inactive_permutation_invariant(ops in proptest::collection::vec(arb_op(), 4), rot in 0usize..4) {
            let policy = SqueezePolicy::new(ThreadCount::Four);
            let base = mac_cycle(&ops, &policy);
            // Swap every inactive thread with another inactive one: rotate
            // the inactive subsequence in place.
            let idx: Vec<usize> = (0..4).filter(|&i| !ops[i].is_active()).collect();
            let mut permuted = ops.clone();
            for (k, &i) in idx.iter().enumerate() {
                permuted[i] = ops[idx[(k + rot) % idx.len()]];
            }
            prop_assert_eq!(mac_cycle(&permuted, &policy).contribution, base.contribution);
        }

        #[test]
        fn hot_loop_matches_mac_cycle(ops in proptest::collection::vec(arb_op(), 4)) {
            let a: [u8; 4] = std::array::from_fn(|i| ops[i].a);
            let w: [i8; 4] = std::array::from_fn(|i| ops[i].w);
            let full = mac_cycle(&ops, &SqueezePolicy::new(ThreadCount::Four));
            let (c, err, act) = squeeze_cycle(&a, &w);
            prop_assert_eq!(c, full.contribution);
            prop_assert_eq!(act, full.active.len());
            prop_assert_eq!(err, full.threads.iter().map(|t| t.error.unsigned_abs()).sum::<u32>());

            let a2 = [a[0], a[1]];
            let w2 = [w[0], w[1]];
            let full2 = mac_cycle(&ops[..2], &SqueezePolicy::new(ThreadCount::Two));
            prop_assert_eq!(squeeze_cycle(&a2, &w2).0, full2.contribution);
        }
    }

    #[test]
    fn unsigned_reduction_monotone() {
        let mut prev = i32::MIN;
        for a in 0..=255u8 {
            let r = reduce_activation(a);
            assert!(r >= prev);
            prev = r;
        }
    }
}
