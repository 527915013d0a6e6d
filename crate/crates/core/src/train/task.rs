//! Synthetic tasks standing in for fine-tuning data.
//!
//! `cluster_regression` draws inputs around a handful of cluster centers and
//! maps each cluster through its own linear map followed by `tanh`. The maps
//! share a common component, so a dense model gets most of the way and experts
//! can specialize on the rest. `modular_classification` labels one-hot
//! encoded integer pairs with `(a + b) mod m`.
//!
//! Both tasks append a constant 1 feature to every input.

use serde::{Deserialize, Serialize};

use crate::error::{DersError, Result};
use crate::numkern::{Matrix, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    ClusterRegression {
        /// Input width including the constant feature.
        d_in: usize,
        n_clusters: usize,
        d_out: usize,
        n_train: usize,
        n_eval: usize,
        #[serde(default = "default_spread")]
        cluster_spread: f64,
        #[serde(default)]
        noise: f64,
        /// Weight of the cluster-specific part of each map.
        #[serde(default = "default_specificity")]
        specificity: f64,
        seed: u64,
    },
    ModularClassification {
        modulus: usize,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        seed: u64,
    },
}

fn default_spread() -> f64 {
    3.0
}

fn default_specificity() -> f64 {
    0.5
}

fn default_train_fraction() -> f64 {
    0.6
}

impl TaskSpec {
    pub fn seed(&self) -> u64 {
        match self {
            TaskSpec::ClusterRegression { seed, .. }
            | TaskSpec::ModularClassification { seed, .. } => *seed,
        }
    }

    pub fn set_seed(&mut self, s: u64) {
        match self {
            TaskSpec::ClusterRegression { seed, .. }
            | TaskSpec::ModularClassification { seed, .. } => *seed = s,
        }
    }

    pub fn d_in(&self) -> usize {
        match *self {
            TaskSpec::ClusterRegression { d_in, .. } => d_in,
            TaskSpec::ModularClassification { modulus, .. } => 2 * modulus + 1,
        }
    }

    pub fn d_out(&self) -> usize {
        match *self {
            TaskSpec::ClusterRegression { d_out, .. } => d_out,
            TaskSpec::ModularClassification { modulus, .. } => modulus,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression(Matrix),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(m) => m.rows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Regression(m) => Targets::Regression(select_rows(m, rows)),
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: select_rows(&self.x, rows),
            targets: self.targets.select(rows),
        }
    }
}

pub(crate) fn select_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    let data = rows
        .iter()
        .flat_map(|&r| m.row(r).iter().copied())
        .collect();
    Matrix::from_vec(rows.len(), m.cols(), data).expect("row selection keeps shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub eval: Dataset,
}

impl SyntheticTask {
    pub fn d_in(&self) -> usize {
        self.spec.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.spec.d_out()
    }
}

const TASK_STREAM: u64 = 0x7A5C;

pub fn make_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    match *spec {
        TaskSpec::ClusterRegression {
            d_in,
            n_clusters,
            d_out,
            n_train,
            n_eval,
            cluster_spread,
            noise,
            specificity,
            seed,
        } => {
            if d_in < 2 || n_clusters == 0 || d_out == 0 || n_train == 0 || n_eval == 0 {
                return Err(DersError::Config(format!(
                    "cluster_regression needs d_in >= 2 and positive n_clusters, d_out, n_train, n_eval (got {d_in}, {n_clusters}, {d_out}, {n_train}, {n_eval})"
                )));
            }
            if !(cluster_spread.is_finite() && noise >= 0.0 && specificity.is_finite()) {
                return Err(DersError::Config(
                    "cluster_regression spread/noise/specificity invalid".into(),
                ));
            }
            let raw = d_in - 1;
            let mut rng = RngStream::scoped(seed, &[TASK_STREAM, 0]);
            let centers = Matrix::normal(
                n_clusters,
                raw,
                cluster_spread / (raw as f64).sqrt(),
                &mut rng,
            );
            let map_std = 1.0 / (d_in as f64).sqrt();
            let common = Matrix::normal(d_in, d_out, map_std, &mut rng);
            let maps: Vec<Matrix> = (0..n_clusters)
                .map(|_| {
                    let own = Matrix::normal(d_in, d_out, map_std, &mut rng);
                    common.add(&own.scale(specificity)).expect("same shape")
                })
                .collect();
            let gen = |n: usize, stream: u64| -> Dataset {
                let mut r = RngStream::scoped(seed, &[TASK_STREAM, stream]);
                let mut x = Matrix::zeros(n, d_in);
                let mut y = Matrix::zeros(n, d_out);
                for i in 0..n {
                    let k = r.below(n_clusters as u64) as usize;
                    let row = x.row_mut(i);
                    for (j, v) in row.iter_mut().take(raw).enumerate() {
                        *v = centers.get(k, j) + r.normal();
                    }
                    row[raw] = 1.0;
                    let xi = x.row(i).to_vec();
                    let t = crate::numkern::vecmat(&xi, &maps[k]).expect("shape");
                    for (j, tv) in t.iter().enumerate() {
                        y.set(i, j, tv.tanh() + noise * r.normal());
                    }
                }
                Dataset {
                    x,
                    targets: Targets::Regression(y),
                }
            };
            Ok(SyntheticTask {
                spec: spec.clone(),
                train: gen(n_train, 1),
                eval: gen(n_eval, 2),
            })
        }
        TaskSpec::ModularClassification {
            modulus,
            train_fraction,
            seed,
        } => {
            if modulus < 2 || !(train_fraction > 0.0 && train_fraction < 1.0) {
                return Err(DersError::Config(format!(
                    "modular_classification needs modulus >= 2 and train_fraction in (0, 1) (got {modulus}, {train_fraction})"
                )));
            }
            let mut pairs: Vec<(usize, usize)> = (0..modulus)
                .flat_map(|a| (0..modulus).map(move |b| (a, b)))
                .collect();
            let mut rng = RngStream::scoped(seed, &[TASK_STREAM, 3]);
            for i in (1..pairs.len()).rev() {
                let j = rng.below(i as u64 + 1) as usize;
                pairs.swap(i, j);
            }
            let n_train = ((pairs.len() as f64) * train_fraction).round() as usize;
            if n_train == 0 || n_train == pairs.len() {
                return Err(DersError::Config(
                    "train_fraction leaves an empty split".into(),
                ));
            }
            let encode = |ps: &[(usize, usize)]| -> Dataset {
                let d = 2 * modulus + 1;
                let mut x = Matrix::zeros(ps.len(), d);
                let mut labels = Vec::with_capacity(ps.len());
                for (i, &(a, b)) in ps.iter().enumerate() {
                    x.set(i, a, 1.0);
                    x.set(i, modulus + b, 1.0);
                    x.set(i, 2 * modulus, 1.0);
                    labels.push((a + b) % modulus);
                }
                Dataset {
                    x,
                    targets: Targets::Classes(labels),
                }
            };
            Ok(SyntheticTask {
                spec: spec.clone(),
                train: encode(&pairs[..n_train]),
                eval: encode(&pairs[n_train..]),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn cluster(seed: u64, n_clusters: usize) -> TaskSpec {
        TaskSpec::ClusterRegression {
            d_in: 6,
            n_clusters,
            d_out: 3,
            n_train: 200,
            n_eval: 100,
            cluster_spread: 3.0,
            noise: 0.0,
            specificity: 0.5,
            seed,
        }
    }

    fn row_keys(m: &Matrix) -> BTreeSet<Vec<u64>> {
        (0..m.rows())
            .map(|r| m.row(r).iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn reproducible_and_disjoint() {
        for spec in [
            cluster(3, 4),
            TaskSpec::ModularClassification {
                modulus: 7,
                train_fraction: 0.5,
                seed: 3,
            },
        ] {
            let a = make_task(&spec).unwrap();
            let b = make_task(&spec).unwrap();
            assert_eq!(a, b);
            let train = row_keys(&a.train.x);
            let eval = row_keys(&a.eval.x);
            assert!(train.is_disjoint(&eval));
            assert_eq!(a.train.x.cols(), spec.d_in());
        }
    }

    #[test]
    fn modular_labels() {
        let t = make_task(&TaskSpec::ModularClassification {
            modulus: 5,
            train_fraction: 0.6,
            seed: 1,
        })
        .unwrap();
        assert_eq!(t.train.len() + t.eval.len(), 25);
        let Targets::Classes(labels) = &t.train.targets else {
            panic!()
        };
        for (i, &l) in labels.iter().enumerate() {
            let row = t.train.x.row(i);
            let a = row[..5].iter().position(|&v| v == 1.0).unwrap();
            let b = row[5..10].iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(l, (a + b) % 5);
        }
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let bad = TaskSpec::ClusterRegression {
            d_in: 1,
            n_clusters: 1,
            d_out: 1,
            n_train: 1,
            n_eval: 1,
            cluster_spread: 1.0,
            noise: 0.0,
            specificity: 0.0,
            seed: 0,
        };
        assert!(matches!(make_task(&bad), Err(DersError::Config(_))));
        let bad = TaskSpec::ModularClassification {
            modulus: 1,
            train_fraction: 0.5,
            seed: 0,
        };
        assert!(matches!(make_task(&bad), Err(DersError::Config(_))));
    }
}
