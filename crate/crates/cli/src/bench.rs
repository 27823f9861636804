//! Benchmark grid: list parsing, one row per cell, CSV output.

use std::time::Duration;

use anyhow::{bail, Context, Result};
use lipchord::admm::StopReason;
use lipchord::network::random_network_name;
use lipchord::{estimate, random_network, EstimateOptions, Method};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One CSV row; column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub net: String,
    pub method: String,
    pub tau: usize,
    pub bound: f64,
    pub wall_time_s: f64,
    pub iters: usize,
    pub converged: bool,
    /// `converged`, `max_iters`, `timeout` or `error`.
    pub status: String,
    pub seed: u64,
}

/// Parses `5,10,20` and inclusive ranges `5..30` or `5..30:5`.
pub fn parse_usize_list(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((lo, rest)) = item.split_once("..") {
            let (hi, step) = match rest.split_once(':') {
                Some((hi, step)) => (hi, step.parse::<usize>().with_context(|| format!("bad step in `{item}`"))?),
                None => (rest, 1),
            };
            let lo: usize = lo.parse().with_context(|| format!("bad range start in `{item}`"))?;
            let hi: usize = hi.parse().with_context(|| format!("bad range end in `{item}`"))?;
            if step == 0 || lo > hi {
                bail!("empty or invalid range `{item}`");
            }
            out.extend((lo..=hi).step_by(step));
        } else {
            out.push(item.parse().with_context(|| format!("`{item}` is not a non-negative integer"))?);
        }
    }
    Ok(out)
}

pub fn parse_methods(text: &str) -> Result<Vec<Method>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|m| m.parse::<Method>().map_err(anyhow::Error::from))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub taus: Vec<usize>,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub time_budget: Option<Duration>,
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        for (name, list) in [("widths", &self.widths), ("depths", &self.depths), ("taus", &self.taus)] {
            if list.is_empty() {
                bail!("--{name} must list at least one value");
            }
        }
        if self.methods.is_empty() {
            bail!("--methods must list at least one method");
        }
        if let Some(d) = self.depths.iter().find(|&&d| d < 2) {
            bail!("depth {d} is too small; networks need at least 2 layers");
        }
        if self.widths.contains(&0) {
            bail!("widths must be positive");
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(usize, usize, Method, usize)> {
        let mut cells = Vec::new();
        for &w in &self.widths {
            for &d in &self.depths {
                for &m in &self.methods {
                    for &t in &self.taus {
                        cells.push((w, d, m, t));
                    }
                }
            }
        }
        cells
    }
}

fn run_cell(grid: &Grid, opts: &EstimateOptions, (w, d, method, tau): (usize, usize, Method, usize)) -> BenchRow {
    let name = random_network_name(w, d);
    let mut row = BenchRow {
        net: name.clone(),
        method: method.name().into(),
        tau,
        bound: f64::NAN,
        wall_time_s: 0.0,
        iters: 0,
        converged: false,
        status: "error".into(),
        seed: grid.seed,
    };
    let result = random_network(w, d, grid.seed).and_then(|net| estimate(&net, method, tau, opts));
    match result {
        Ok(e) => {
            row.bound = e.report.lipschitz_bound;
            row.wall_time_s = e.report.wall_time_s;
            row.iters = e.report.iters;
            row.converged = e.report.converged;
            row.status = match e.output.map(|o| o.stop) {
                None | Some(StopReason::Converged) => "converged",
                Some(StopReason::MaxIters) => "max_iters",
                Some(StopReason::TimeBudget) => "timeout",
            }
            .into();
        }
        Err(err) => log::error!("{name} {} tau={tau}: {err}", method.name()),
    }
    row
}

/// Runs every cell, in parallel when the pool has more than one thread.
/// Rows come back in grid order.
pub fn run(grid: &Grid, opts: &EstimateOptions, threads: usize) -> Result<Vec<BenchRow>> {
    grid.validate()?;
    let mut opts = opts.clone();
    opts.solve.time_budget = grid.time_budget;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
    let cells = grid.cells();
    Ok(pool.install(|| cells.par_iter().map(|&c| run_cell(grid, &opts, c)).collect()))
}

pub fn to_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[cfg(test)]
pub fn from_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_and_ranges() {
        assert_eq!(parse_usize_list("5,10, 20").unwrap(), vec![5, 10, 20]);
        assert_eq!(parse_usize_list("5..8").unwrap(), vec![5, 6, 7, 8]);
        assert_eq!(parse_usize_list("5..30:10,40").unwrap(), vec![5, 15, 25, 40]);
        assert!(parse_usize_list("").unwrap().is_empty());
        assert!(parse_usize_list("3..1").is_err());
        assert!(parse_usize_list("x").is_err());
        assert_eq!(parse_methods("chordal,naive").unwrap(), vec![Method::Chordal, Method::Naive]);
        assert!(parse_methods("chordal,ipm").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            BenchRow {
                net: "W10-D5".into(),
                method: "chordal".into(),
                tau: 2,
                bound: 97.84781063501092,
                wall_time_s: 0.125,
                iters: 1234,
                converged: true,
                status: "converged".into(),
                seed: 7,
            },
            BenchRow {
                net: "W10-D30".into(),
                method: "dense".into(),
                tau: 0,
                bound: 1.0e13 / 3.0,
                wall_time_s: 60.5,
                iters: 9,
                converged: false,
                status: "timeout".into(),
                seed: 7,
            },
        ];
        let text = to_csv(&rows).unwrap();
        assert!(text.starts_with("net,method,tau,bound,wall_time_s,iters,converged,status,seed\n"));
        assert_eq!(from_csv(&text).unwrap(), rows);
    }

    #[test]
    fn empty_lists_are_rejected() {
        let grid = Grid {
            widths: vec![3],
            depths: vec![2],
            taus: vec![],
            methods: vec![Method::Naive],
            seed: 0,
            time_budget: None,
        };
        assert!(grid.validate().is_err());
    }
}
