use serde::{Deserialize, Serialize};

/// Layer shape and adapter settings the costs are evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub c_in: usize,
    pub c_out: usize,
    pub atoms: usize,
    pub rank: usize,
    pub tokens: usize,
    pub density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodCost {
    pub train_params: f64,
    pub storage_params: f64,
    pub flops: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub inputs: CostInputs,
    pub sparse: MethodCost,
    pub low_rank: MethodCost,
}

/// Closed-form parameter, storage and FLOP counts for one adapted layer.
///
/// Sparse storage keeps `W_s` dense and only the nonzero fraction of `D`.
/// Low-rank storage equals its parameter count.
pub fn cost_report(c_in: usize, c_out: usize, atoms: usize, rank: usize, tokens: usize, density: f64) -> CostReport {
    let (ci, co, m, r, n) = (c_in as f64, c_out as f64, atoms as f64, rank as f64, tokens as f64);
    let rho = density;
    let sparse = MethodCost {
        train_params: (ci + co) * m,
        storage_params: ci * m + rho * co * m,
        flops: 2.0 * n * m * ci + 2.0 * rho * n * m * co,
    };
    let lora_params = 4.0 * (ci + co) * r;
    let low_rank = MethodCost { train_params: lora_params, storage_params: lora_params, flops: 8.0 * ci * co * r };
    CostReport { inputs: CostInputs { c_in, c_out, atoms, rank, tokens, density }, sparse, low_rank }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_atoms_cost_nothing() {
        let r = cost_report(64, 32, 0, 4, 10, 0.5);
        assert_eq!(r.sparse, MethodCost { train_params: 0.0, storage_params: 0.0, flops: 0.0 });
        assert_eq!(r.low_rank.train_params, 4.0 * 96.0 * 4.0);
    }

    #[test]
    fn dense_limit() {
        let r = cost_report(12, 20, 7, 1, 9, 1.0);
        assert_eq!(r.sparse.storage_params, (12.0 + 20.0) * 7.0);
        assert_eq!(r.sparse.flops, 2.0 * 9.0 * 7.0 * 32.0);
    }
}
