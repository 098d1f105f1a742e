use crate::motion::BodyPartition;
use crate::tensor::Tensor;

/// `(n+1) × (n+1)` additive mask: 0 where two tokens share a body part, −∞ otherwise.
/// Tokens `0..n` are joints in skeleton order; token `n` is foot contact.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMask {
    values: Tensor,
}

impl AdjacencyMask {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.values.at(i, j) == 0.0
    }

    /// Mask with every pair allowed.
    pub fn open(tokens: usize) -> Self {
        Self {
            values: Tensor::zeros(&[tokens, tokens]),
        }
    }
}

pub fn build_adjacency_mask(partition: &BodyPartition) -> AdjacencyMask {
    let tokens = partition.joint_count() + 1;
    let parts: Vec<_> = (0..tokens).map(|t| partition.token_parts(t)).collect();
    let mut values = Tensor::zeros(&[tokens, tokens]);
    for i in 0..tokens {
        for j in 0..tokens {
            if parts[i].is_disjoint(&parts[j]) {
                values.row_mut(i)[j] = f64::NEG_INFINITY;
            }
        }
    }
    AdjacencyMask { values }
}
