use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Planar distances from every passive series to every active series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoIndex {
    /// `Δ[i][j]`: passive series `i` to active series `j`, shape `N^P × N^A`.
    pub delta: Tensor,
    pub k: usize,
}

impl GeoIndex {
    pub fn new(active: &[(f64, f64)], passive: &[(f64, f64)], k: usize) -> Self {
        GeoIndex {
            delta: distance_matrix(active, passive),
            k,
        }
    }

    pub fn n_passive(&self) -> usize {
        self.delta.shape()[0]
    }

    pub fn n_active(&self) -> usize {
        self.delta.shape()[1]
    }
}

/// Euclidean distance matrix of shape `passive.len() × active.len()`.
pub fn distance_matrix(active: &[(f64, f64)], passive: &[(f64, f64)]) -> Tensor {
    let data = passive
        .iter()
        .flat_map(|&(px, py)| {
            active.iter().map(move |&(ax, ay)| {
                let (dx, dy) = (px - ax, py - ay);
                (dx * dx + dy * dy).sqrt()
            })
        })
        .collect();
    Tensor::new(vec![passive.len(), active.len()], data).expect("non-empty coordinate lists")
}
