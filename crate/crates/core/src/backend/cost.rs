//! Token usage accounting and exact cost arithmetic.

use std::ops::{Add, AddAssign};

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl Usage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        Self {
            input_tokens,
            output_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

impl Add for Usage {
    type Output = Usage;
    fn add(self, o: Usage) -> Usage {
        Usage::new(self.input_tokens + o.input_tokens, self.output_tokens + o.output_tokens)
    }
}

impl AddAssign for Usage {
    fn add_assign(&mut self, o: Usage) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Usage {
    fn sum<I: Iterator<Item = Usage>>(iter: I) -> Usage {
        iter.fold(Usage::default(), Add::add)
    }
}

/// Prices in USD per 1,000 tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pricing {
    #[serde(with = "rust_decimal::serde::str")]
    pub usd_per_1k_input_tokens: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub usd_per_1k_output_tokens: Decimal,
}

/// Unrounded cost of `usage`.
pub fn exact_cost(usage: &[Usage], pricing: &Pricing) -> Decimal {
    let thousand = Decimal::from(1000);
    usage.iter().fold(Decimal::ZERO, |acc, u| {
        acc + Decimal::from(u.input_tokens) / thousand * pricing.usd_per_1k_input_tokens
            + Decimal::from(u.output_tokens) / thousand * pricing.usd_per_1k_output_tokens
    })
}

/// Total cost rounded half-up to cents, rounding only once at the end.
pub fn accumulate_cost(usage: &[Usage], pricing: &Pricing) -> Decimal {
    exact_cost(usage, pricing).round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero)
}
