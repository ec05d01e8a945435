use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultimodalDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Whole modalities go missing per sample.
    MissingModalities,
    /// Individual cells go missing anywhere.
    AllMissing,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::MissingModalities, Scenario::AllMissing];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::MissingModalities => "missing_modalities",
            Scenario::AllMissing => "all_missing",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "missing_modalities" => Ok(Scenario::MissingModalities),
            "all_missing" => Ok(Scenario::AllMissing),
            _ => Err(format!("unknown scenario `{s}` (expected missing_modalities or all_missing)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessPlan {
    pub scenario: Scenario,
    pub rate: f64,
    pub seed: u64,
    pub scope: Scope,
}

impl MissingnessPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::InvalidArgument(format!(
                "missing rate must lie in [0, 1), got {}",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Availability grid over which a scenario injects missingness: samples by
/// modalities, or samples by all features.
struct Grid {
    rows: usize,
    cols: usize,
    available: Vec<bool>,
}

impl Grid {
    fn of(ds: &MultimodalDataset, scenario: Scenario) -> Grid {
        let rows = ds.n_samples();
        match scenario {
            Scenario::MissingModalities => {
                let cols = ds.n_modalities();
                let mut available = Vec::with_capacity(rows * cols);
                for s in 0..rows {
                    available.extend(ds.modalities.iter().map(|m| m.is_present(s)));
                }
                Grid { rows, cols, available }
            }
            Scenario::AllMissing => {
                let cols = ds.total_features();
                let mut available = Vec::with_capacity(rows * cols);
                for s in 0..rows {
                    for m in &ds.modalities {
                        available.extend_from_slice(m.row_observed(s));
                    }
                }
                Grid { rows, cols, available }
            }
        }
    }

    fn missing(&self) -> usize {
        self.available.iter().filter(|&&a| !a).count()
    }

    fn row_count(&self, r: usize) -> usize {
        self.available[r * self.cols..(r + 1) * self.cols].iter().filter(|&&a| a).count()
    }

    fn col_count(&self, c: usize) -> usize {
        (0..self.rows).filter(|&r| self.available[r * self.cols + c]).count()
    }
}

/// Pre-existing missing rate Ω of `ds` in the units of `scenario`.
pub fn missing_rate(ds: &MultimodalDataset, scenario: Scenario) -> f64 {
    let g = Grid::of(ds, scenario);
    if g.available.is_empty() {
        return 0.0;
    }
    g.missing() as f64 / g.available.len() as f64
}

/// Number of grid cells `plan` adds on top of the existing missingness:
/// `ceil(N * width * p - pre_missing)`, never negative.
pub fn injection_target(ds: &MultimodalDataset, plan: &MissingnessPlan) -> usize {
    let g = Grid::of(ds, plan.scenario);
    target_count(g.rows, g.cols, plan.rate, g.missing())
}

fn target_count(rows: usize, cols: usize, rate: f64, pre_missing: usize) -> usize {
    let raw = (rows * cols) as f64 * rate - pre_missing as f64;
    // absorb representation noise such as 100 * 0.07 = 7.000000000000001
    let t = (raw - 1e-9).ceil();
    if t <= 0.0 {
        0
    } else {
        t as usize
    }
}

/// Masks completely at random until the grid reaches `plan.rate`.
///
/// Every grid row and column that receives a new masked cell keeps at least
/// one available entry; violations are repaired by swapping a newly masked
/// cell of the offending line with a uniformly drawn donor elsewhere, which
/// keeps the masked total exact.
pub fn inject_mcar(ds: &MultimodalDataset, plan: &MissingnessPlan) -> Result<MultimodalDataset> {
    plan.validate()?;
    let mut grid = Grid::of(ds, plan.scenario);
    let target = target_count(grid.rows, grid.cols, plan.rate, grid.missing());
    if target == 0 {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut candidates: Vec<usize> = (0..grid.available.len()).filter(|&i| grid.available[i]).collect();
    if target > candidates.len() {
        return Err(Error::Infeasible(format!(
            "{target} cells requested but only {} remain available",
            candidates.len()
        )));
    }
    candidates.shuffle(&mut rng);
    let mut fresh = vec![false; grid.available.len()];
    for &i in &candidates[..target] {
        grid.available[i] = false;
        fresh[i] = true;
    }
    repair(&mut grid, &mut fresh, &mut rng)?;

    let mut out = ds.clone();
    for (cell, _) in fresh.iter().enumerate().filter(|(_, &f)| f) {
        let (s, c) = (cell / grid.cols, cell % grid.cols);
        match plan.scenario {
            Scenario::MissingModalities => {
                let m = &mut out.modalities[c];
                for f in 0..m.width() {
                    m.set_missing(s, f);
                }
            }
            Scenario::AllMissing => {
                let (m, f) = locate(&out, c);
                out.modalities[m].set_missing(s, f);
            }
        }
    }
    Ok(out)
}

fn locate(ds: &MultimodalDataset, mut flat: usize) -> (usize, usize) {
    for (m, modality) in ds.modalities.iter().enumerate() {
        if flat < modality.width() {
            return (m, flat);
        }
        flat -= modality.width();
    }
    unreachable!("feature index out of range")
}

#[derive(Clone, Copy)]
enum Line {
    Row(usize),
    Col(usize),
}

fn repair(grid: &mut Grid, fresh: &mut [bool], rng: &mut ChaCha8Rng) -> Result<()> {
    let cols = grid.cols;
    loop {
        let empty_row = (0..grid.rows)
            .find(|&r| grid.row_count(r) == 0 && (0..cols).any(|c| fresh[r * cols + c]))
            .map(Line::Row);
        let empty_col = || {
            (0..cols)
                .find(|&c| grid.col_count(c) == 0 && (0..grid.rows).any(|r| fresh[r * cols + c]))
                .map(Line::Col)
        };
        let Some(line) = empty_row.or_else(empty_col) else { break };
        let cells: Vec<usize> = match line {
            Line::Row(r) => (0..cols).map(|c| r * cols + c).collect(),
            Line::Col(c) => (0..grid.rows).map(|r| r * cols + c).collect(),
        };
        let masked: Vec<usize> = cells.into_iter().filter(|&i| fresh[i]).collect();
        let &back = masked.choose(rng).expect("line has a newly masked cell");
        grid.available[back] = true;
        fresh[back] = false;

        let donors: Vec<usize> = (0..grid.available.len())
            .filter(|&i| {
                grid.available[i]
                    && i != back
                    && grid.row_count(i / cols) >= 2
                    && grid.col_count(i % cols) >= 2
            })
            .collect();
        let Some(&donor) = donors.choose(rng) else {
            return Err(Error::Infeasible(
                "cannot keep one available entry in every row and column at this rate".into(),
            ));
        };
        grid.available[donor] = false;
        fresh[donor] = true;
    }
    for r in (0..grid.rows).filter(|&r| grid.row_count(r) == 0) {
        warn!("grid row {r} was already empty before injection");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureSchema, Modality};

    fn toy(n: usize, widths: &[usize]) -> MultimodalDataset {
        let modalities = widths
            .iter()
            .enumerate()
            .map(|(m, &w)| {
                Modality::new(
                    format!("m{m}"),
                    (0..w).map(|f| FeatureSchema::numerical(format!("m{m}f{f}"))).collect(),
                    vec![1.0; n * w],
                    vec![true; n * w],
                )
                .unwrap()
            })
            .collect();
        MultimodalDataset::new(
            modalities,
            (0..n).map(|i| i % 2).collect(),
            vec!["a".into(), "b".into()],
            (0..n).map(|i| format!("s{i}")).collect(),
        )
        .unwrap()
    }

    fn plan(scenario: Scenario, rate: f64, seed: u64) -> MissingnessPlan {
        MissingnessPlan { scenario, rate, seed, scope: Scope::Train }
    }

    fn absent_modalities(ds: &MultimodalDataset) -> usize {
        (0..ds.n_samples())
            .map(|s| ds.modalities.iter().filter(|m| !m.is_present(s)).count())
            .sum()
    }

    #[test]
    fn four_by_two_half() {
        let ds = toy(4, &[2, 3]);
        let out = inject_mcar(&ds, &plan(Scenario::MissingModalities, 0.5, 1)).unwrap();
        assert_eq!(absent_modalities(&out), 4);
        assert!(out.empty_samples().is_empty());
        assert_eq!(out.labels, ds.labels);
    }

    #[test]
    fn pre_existing_cells_count_toward_target() {
        let mut ds = toy(4, &[2, 3]);
        for f in 0..2 {
            ds.modalities[0].set_missing(0, f);
        }
        for f in 0..3 {
            ds.modalities[1].set_missing(1, f);
        }
        let p = plan(Scenario::MissingModalities, 0.5, 9);
        assert_eq!(injection_target(&ds, &p), 2);
        let out = inject_mcar(&ds, &p).unwrap();
        assert_eq!(absent_modalities(&out), 4);
    }

    #[test]
    fn rate_below_omega_adds_nothing() {
        let mut ds = toy(10, &[3]);
        for s in 0..3 {
            ds.modalities[0].set_missing(s, 0);
        }
        assert!((missing_rate(&ds, Scenario::AllMissing) - 0.1).abs() < 1e-12);
        let out = inject_mcar(&ds, &plan(Scenario::AllMissing, 0.05, 2)).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn ceiling_tolerates_float_noise() {
        assert_eq!(target_count(100, 1, 0.07, 0), 7);
        assert_eq!(target_count(10, 3, 0.05, 0), 2);
        assert_eq!(target_count(10, 3, 0.05, 5), 0);
    }

    #[test]
    fn infeasible_rate_is_reported() {
        let ds = toy(6, &[1, 1]);
        let err = inject_mcar(&ds, &plan(Scenario::MissingModalities, 0.75, 4)).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err}");
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = toy(30, &[3, 4]);
        let p = plan(Scenario::AllMissing, 0.5, 77);
        assert_eq!(inject_mcar(&ds, &p).unwrap(), inject_mcar(&ds, &p).unwrap());
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.as_str().parse::<Scenario>().unwrap(), s);
        }
        assert!("neither".parse::<Scenario>().is_err());
    }
}
