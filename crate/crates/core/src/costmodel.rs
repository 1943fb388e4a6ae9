//! Closed-form per-token FLOP and parameter accounting.
//!
//! A multiply-add counts as 2 FLOPs, so a `d × d` projection costs `2d²`.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::Serialize;

/// Costs the closed forms leave out on purpose.
pub const EXCLUDED: [&str; 6] = [
    "normalization layers",
    "activation functions",
    "embedding and value-bank gathers",
    "output head projection",
    "softmax and gate sigmoid",
    "element-wise gated value mixing",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub d: u64,
    pub heads: u64,
    pub slots: u64,
    pub context: u64,
    /// `8d²`: Q, K, V, O projections.
    pub c_proj: u64,
    /// `16d²`: two-matrix FFN with 4× expansion.
    pub c_ffn: u64,
    /// `4Td`: scores and value aggregation, amortized per token.
    pub c_sdpa: u64,
    pub c_std: u64,
    /// `2dH(M+1)`: the router projection.
    pub c_move: u64,
    /// `H(M+1)`, unreduced.
    pub ratio_numerator: u64,
    /// `12d + 2T`, unreduced.
    pub ratio_denominator: u64,
}

/// `(8d², 16d², 4Td)`.
pub fn flops_std(d: u64, context: u64) -> (u64, u64, u64) {
    (8 * d * d, 16 * d * d, 4 * context * d)
}

pub fn flops_move(d: u64, heads: u64, slots: u64) -> u64 {
    2 * d * heads * (slots + 1)
}

/// `H(M+1) / (12d + 2T)` as an exact fraction in lowest terms.
pub fn overhead_ratio(d: u64, heads: u64, slots: u64, context: u64) -> Ratio<u64> {
    Ratio::new(heads * (slots + 1), 12 * d + 2 * context)
}

/// `N_vocab · M · width` (width is `d`, or `d_c` for a latent bank).
pub fn bank_params(vocab: u64, slots: u64, width: u64) -> u64 {
    vocab * slots * width
}

impl FlopReport {
    pub fn new(d: u64, heads: u64, slots: u64, context: u64) -> Self {
        let (c_proj, c_ffn, c_sdpa) = flops_std(d, context);
        FlopReport {
            d,
            heads,
            slots,
            context,
            c_proj,
            c_ffn,
            c_sdpa,
            c_std: c_proj + c_ffn + c_sdpa,
            c_move: flops_move(d, heads, slots),
            ratio_numerator: heads * (slots + 1),
            ratio_denominator: 12 * d + 2 * context,
        }
    }

    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.ratio_numerator, self.ratio_denominator)
    }

    pub fn ratio_f64(&self) -> f64 {
        self.ratio_numerator as f64 / self.ratio_denominator as f64
    }

    pub fn to_text(&self) -> String {
        let r = self.ratio();
        let mut s = String::new();
        let _ = writeln!(s, "inputs: d={} H={} M={} T={}", self.d, self.heads, self.slots, self.context);
        let _ = writeln!(s, "projections (8d^2):      {}", self.c_proj);
        let _ = writeln!(s, "ffn (16d^2):             {}", self.c_ffn);
        let _ = writeln!(s, "attention (4Td):         {}", self.c_sdpa);
        let _ = writeln!(s, "standard block (C_std):  {}", self.c_std);
        let _ = writeln!(s, "router (C_move):         {}", self.c_move);
        let _ = writeln!(
            s,
            "overhead ratio: {}/{} = {}/{} = {:.2}%",
            self.ratio_numerator,
            self.ratio_denominator,
            r.numer(),
            r.denom(),
            100.0 * self.ratio_f64()
        );
        let _ = writeln!(s, "excluded: {}", EXCLUDED.join("; "));
        s
    }

    /// One `key=value` per line, in a stable order.
    pub fn to_key_values(&self) -> String {
        let r = self.ratio();
        let mut s = String::new();
        let rows: [(&str, String); 15] = [
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("slots", self.slots.to_string()),
            ("context", self.context.to_string()),
            ("c_proj", self.c_proj.to_string()),
            ("c_ffn", self.c_ffn.to_string()),
            ("c_sdpa", self.c_sdpa.to_string()),
            ("c_std", self.c_std.to_string()),
            ("c_move", self.c_move.to_string()),
            ("ratio_numerator", self.ratio_numerator.to_string()),
            ("ratio_denominator", self.ratio_denominator.to_string()),
            ("ratio_reduced", format!("{}/{}", r.numer(), r.denom())),
            ("ratio", format!("{:.17}", self.ratio_f64())),
            ("ratio_percent", format!("{:.2}", 100.0 * self.ratio_f64())),
            ("excluded", EXCLUDED.join(";")),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::SeqShape;
    use crate::model::{forward_tape, ModelConfig, ModelParams, Variant};
    use crate::numerics::Tape;
    use proptest::prelude::*;

    #[test]
    fn large_model_example() {
        let r = FlopReport::new(2048, 16, 32, 2048);
        assert_eq!(r.c_std, 117_440_512);
        assert_eq!(r.c_move, 2_162_688);
        assert_eq!((r.ratio_numerator, r.ratio_denominator), (528, 28672));
        assert_eq!(r.ratio(), Ratio::new(528, 28672));
        assert!((100.0 * r.ratio_f64() - 1.84).abs() < 0.005);
        assert!(r.to_text().contains("528/28672"));
        assert!(r.to_text().contains("1.84%"));
        assert!(r.to_key_values().contains("ratio_numerator=528\n"));
    }

    #[test]
    fn small_cases() {
        assert_eq!(flops_std(64, 0), (8 * 64 * 64, 16 * 64 * 64, 0));
        let (p1, f1, _) = flops_std(10, 3);
        let (p2, f2, _) = flops_std(20, 3);
        assert_eq!(p2 + f2, 4 * (p1 + f1));
        assert_eq!(flops_move(7, 3, 0), 2 * 7 * 3);
        assert_eq!(overhead_ratio(768, 12, 0, 2048), Ratio::new(12, 13312));
        assert!(overhead_ratio(64, 4, 8, 1 << 40) < Ratio::new(1, 1 << 30));
        assert_eq!(bank_params(65536, 6, 768), 301_989_888);
        assert_eq!(bank_params(65536, 12, 768), 603_979_776);
        assert_eq!(bank_params(65536, 0, 768), 0);
    }

    proptest! {
        #[test]
        fn ratio_times_std_cost_is_router_cost(d in 1u64..4096, h in 1u64..64, m in 0u64..256, t in 0u64..8192) {
            let r = FlopReport::new(d, h, m, t);
            prop_assert_eq!(r.c_std, r.c_proj + r.c_ffn + r.c_sdpa);
            prop_assert_eq!(r.ratio() * Ratio::from_integer(r.c_std), Ratio::from_integer(r.c_move));
            prop_assert_eq!(r.ratio(), overhead_ratio(d, h, m, t));
            prop_assert_eq!(flops_move(d, h, m) * 2, flops_move(d, h, 2 * m + 1));
        }
    }

    #[test]
    fn instrumented_forward_matches_closed_forms() {
        let (l, d, h, v, t) = (2u64, 16u64, 4u64, 11u64, 6u64);
        let mut c = ModelConfig::new(Variant::Move, l as usize, d as usize, h as usize, v as usize, t as usize);
        c.scale = 2;
        let m = c.slots() as u64;
        let p = ModelParams::<f64>::init(&c).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let tokens: Vec<usize> = (0..t as usize).collect();
        forward_tape(&mut tape, &p, &bound, &tokens, SeqShape::single(t as usize), false).unwrap();
        let stats = tape.stats();
        let r = FlopReport::new(d, h, m, t);
        let head = 2 * d * v;
        assert_eq!(stats.matmul, t * (l * (r.c_proj + r.c_ffn + r.c_move) + head));
        assert_eq!(stats.attention, t * l * r.c_sdpa);
    }
}
