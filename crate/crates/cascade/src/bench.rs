//! Top-K recall of ensemble, single-tree and exact joint max-marginals on
//! random grids, against exact samples of the joint distribution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use structcascade_core::ensemble::{
    brute_force_grid_max_marginals, ensemble_max_marginals, NodeStates,
};
use structcascade_core::model::State;

use crate::synth::{sample_grid, synth_grid};
use crate::Result;

pub const HEADER: &str = "top_k,ensemble_miss_rate,submodel_miss_rate,joint_miss_rate";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub top_k: usize,
    /// Fraction of nodes whose sampled state ranks below `top_k` by summed max-marginals.
    pub ensemble_miss: f64,
    /// The same for a single sub-model, averaged over sub-models.
    pub submodel_miss: f64,
    /// The same for exact joint max-marginals.
    pub joint_miss: f64,
}

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.top_k, self.ensemble_miss, self.submodel_miss, self.joint_miss
        )
    }
}

/// Position of `state` when a node's states are sorted by value, ties by id.
fn rank(values: &[f64], state: usize) -> usize {
    let v = values[state];
    values
        .iter()
        .enumerate()
        .filter(|&(i, &w)| w > v || (w == v && i < state))
        .count()
}

pub fn grid_bench(
    rows: usize,
    cols: usize,
    num_states: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let k = num_states;
    // misses[t] counts ranks ≥ t + 1, i.e. misses at top_k = t + 1.
    let (mut ens, mut sub, mut joint) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    let mut nodes = 0usize;
    for i in 0..count {
        let instance = synth_grid(rows, cols, k, seed.wrapping_add(i as u64))?;
        let grid = &instance.model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64) ^ 0x005e_ed0f_6a1d);
        let truth: Vec<State> = sample_grid(grid, &mut rng)?;
        let states = NodeStates::full(grid.shape.num_nodes(), k);
        let table = ensemble_max_marginals(&grid.comb_potentials()?, &states)?;
        let exact = brute_force_grid_max_marginals(grid, &states)?;
        let p = table.num_models() as f64;
        for (v, &y) in truth.iter().enumerate() {
            let y = y as usize;
            let r_ens = rank(table.summed(v), y);
            let r_joint = rank(&exact[v], y);
            for t in 0..k {
                ens[t] += f64::from(u8::from(r_ens > t));
                joint[t] += f64::from(u8::from(r_joint > t));
            }
            for m in 0..table.num_models() {
                let r = rank(table.table(m).values(v), y);
                for (t, s) in sub.iter_mut().enumerate() {
                    *s += f64::from(u8::from(r > t)) / p;
                }
            }
            nodes += 1;
        }
    }
    if nodes == 0 {
        return Ok(Vec::new());
    }
    let n = nodes as f64;
    Ok((0..k)
        .map(|t| BenchRow {
            top_k: t + 1,
            ensemble_miss: ens[t] / n,
            submodel_miss: sub[t] / n,
            joint_miss: joint[t] / n,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_break_ties_by_id() {
        assert_eq!(rank(&[1.0, 3.0, 3.0, 0.0], 2), 1);
        assert_eq!(rank(&[1.0, 3.0, 3.0, 0.0], 1), 0);
        assert_eq!(rank(&[1.0, 3.0, 3.0, 0.0], 3), 3);
    }

    #[test]
    fn rows_and_monotonicity() {
        let rows = grid_bench(2, 2, 3, 5, 1).unwrap();
        assert_eq!(rows.len(), 3);
        for w in rows.windows(2) {
            assert!(w[1].ensemble_miss <= w[0].ensemble_miss);
            assert!(w[1].joint_miss <= w[0].joint_miss);
        }
        let last = rows.last().unwrap();
        assert_eq!(
            (last.ensemble_miss, last.submodel_miss, last.joint_miss),
            (0.0, 0.0, 0.0)
        );
        assert!(grid_bench(2, 2, 3, 0, 1).unwrap().is_empty());
        assert_eq!(grid_bench(2, 2, 3, 5, 1).unwrap(), rows);
    }
}
