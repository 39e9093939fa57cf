//! Scaled-integer token bucket.
//!
//! A bucket with rate `r = N/P` and depth `b = M/P` is tracked in units of
//! `1/P` tokens, so the state is an integer `n_bar` in `[0, M]`. Every slot
//! adds `N`; an offload costs `P` and needs `n_bar >= P`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer bucket parameters: `fill` (N), `cost` (P) and `capacity` (M).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BucketParams {
    pub fill: u64,
    pub cost: u64,
    pub capacity: u64,
}

/// Scaled token count `n_bar`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BucketState(pub u64);

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

impl BucketParams {
    pub fn new(fill: u64, cost: u64, capacity: u64) -> Result<Self> {
        if fill == 0 || fill > cost || cost > capacity {
            return Err(Error::InvalidBucket(format!(
                "need 1 <= N <= P <= M, got N={fill} P={cost} M={capacity}"
            )));
        }
        Ok(Self {
            fill,
            cost,
            capacity,
        })
    }

    /// Canonical `(N, P, M)` for rate `r_num/r_den` and depth `b_num/b_den`,
    /// using the smallest `P` that makes all three integral.
    pub fn from_rational(r_num: u64, r_den: u64, b_num: u64, b_den: u64) -> Result<Self> {
        if r_den == 0 || b_den == 0 {
            return Err(Error::InvalidBucket("zero denominator".into()));
        }
        if r_num == 0 || r_num > r_den {
            return Err(Error::InvalidBucket(format!(
                "rate {r_num}/{r_den} must lie in (0, 1]"
            )));
        }
        if b_num < b_den {
            return Err(Error::InvalidBucket(format!(
                "depth {b_num}/{b_den} must be at least 1"
            )));
        }
        let gr = gcd(r_num, r_den);
        let (rn, rd) = (r_num / gr, r_den / gr);
        let gb = gcd(b_num, b_den);
        let (bn, bd) = (b_num / gb, b_den / gb);
        let cost = lcm(rd, bd);
        Self::new(rn * (cost / rd), cost, bn * (cost / bd))
    }

    /// Token rate `r = N/P`.
    pub fn rate(&self) -> f64 {
        self.fill as f64 / self.cost as f64
    }

    /// Bucket depth `b = M/P`.
    pub fn depth(&self) -> f64 {
        self.capacity as f64 / self.cost as f64
    }

    pub fn full(&self) -> BucketState {
        BucketState(self.capacity)
    }

    pub fn can_offload(&self, state: BucketState) -> bool {
        state.0 >= self.cost
    }

    /// One slot of `n_bar' = min(M, n_bar - P*a + N)`.
    pub fn step(&self, state: BucketState, offload: bool) -> Result<BucketState> {
        self.advance(state, offload, 1)
    }

    /// Applies the action, then `gap` slots of replenishment:
    /// `min(M, n_bar - P*a + N*gap)`.
    pub fn advance(&self, state: BucketState, offload: bool, gap: u64) -> Result<BucketState> {
        debug_assert!(gap >= 1, "advance needs a gap of at least one slot");
        let mut n_bar = state.0;
        if offload {
            if n_bar < self.cost {
                return Err(Error::InsufficientTokens {
                    n_bar,
                    cost: self.cost,
                });
            }
            n_bar -= self.cost;
        }
        let refill = self.fill.saturating_mul(gap);
        Ok(BucketState(
            n_bar.saturating_add(refill).min(self.capacity),
        ))
    }

    /// Upper bound on offloads in any window of `slots` slots, starting full.
    pub fn window_bound(&self, slots: u64) -> u64 {
        (self.fill * slots + self.capacity) / self.cost
    }
}

/// Free function form of [`BucketParams::can_offload`].
pub fn can_offload(state: BucketState, params: &BucketParams) -> bool {
    params.can_offload(state)
}
