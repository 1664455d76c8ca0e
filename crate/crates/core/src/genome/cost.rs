use serde::{Deserialize, Serialize};

use super::{Genes, OperatorCode};
use crate::error::{Error, Result};

/// Input geometry of the layer a cell is placed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl LayerShape {
    pub fn new(c_in: usize, c_out: usize, h: usize, w: usize, stride: usize) -> Self {
        LayerShape {
            c_in,
            c_out,
            h,
            w,
            stride,
        }
    }

    /// Spatial size after the IN node (2x2 average pooling when strided).
    pub fn inner_hw(&self) -> (usize, usize) {
        (self.h / self.stride, self.w / self.stride)
    }
}

/// Upper bound on a cell's multiply-adds. A cell is admitted iff its count
/// is strictly below the budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct MaddsBudget(u64);

impl MaddsBudget {
    pub const UNLIMITED: MaddsBudget = MaddsBudget(u64::MAX);

    pub fn new(max: u64) -> Result<Self> {
        if max == 0 {
            return Err(Error::invalid("MAdds budget must be positive"));
        }
        Ok(MaddsBudget(max))
    }

    pub fn get(self) -> u64 {
        self.0
    }

    pub fn admits(self, madds: u64) -> bool {
        madds < self.0
    }
}

impl TryFrom<u64> for MaddsBudget {
    type Error = Error;

    fn try_from(v: u64) -> Result<Self> {
        MaddsBudget::new(v)
    }
}

impl From<MaddsBudget> for u64 {
    fn from(b: MaddsBudget) -> u64 {
        b.0
    }
}

/// Multiply-adds of one realized cell: IN expansion, the six edge operators
/// and the OUT projection. Pooling, normalization and aggregation are free.
pub fn madds(genes: &Genes, shape: &LayerShape) -> u64 {
    let (h, w) = shape.inner_hw();
    let hw = (h * w) as u64;
    let c_in = shape.c_in as u64;
    let inner = genes.ratio.value() as u64 * c_in;
    let expand = c_in * inner * hw;
    let project = inner * shape.c_out as u64 * hw;
    let edges: u64 = genes
        .edges
        .iter()
        .map(|op| match op {
            OperatorCode::Zero | OperatorCode::Identity => 0,
            OperatorCode::Conv1x1 => inner * inner * hw,
            OperatorCode::Conv3x3 => 9 * inner * inner * hw,
            OperatorCode::DwConv3x3 => 9 * inner * hw,
        })
        .sum();
    expand + edges + project
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{Aggregation, ChannelRatio};

    fn genes(edges: [OperatorCode; 6]) -> Genes {
        Genes {
            edges,
            ratio: ChannelRatio::R1,
            agg: Aggregation::Add,
        }
    }

    #[test]
    fn io_only_cell() {
        let shape = LayerShape::new(8, 8, 16, 16, 1);
        assert_eq!(madds(&genes([OperatorCode::Zero; 6]), &shape), 32768);
    }

    #[test]
    fn single_conv3x3_and_depthwise() {
        let shape = LayerShape::new(8, 8, 16, 16, 1);
        let mut e = [OperatorCode::Zero; 6];
        e[1] = OperatorCode::Conv3x3;
        assert_eq!(madds(&genes(e), &shape), 32768 + 147456);
        e[1] = OperatorCode::DwConv3x3;
        assert_eq!(madds(&genes(e), &shape), 32768 + 147456 / 8);
    }

    #[test]
    fn stride_reduces_inner_resolution() {
        let s1 = LayerShape::new(4, 8, 8, 8, 1);
        let s2 = LayerShape::new(4, 8, 8, 8, 2);
        let g = genes([OperatorCode::Conv3x3; 6]);
        assert_eq!(madds(&g, &s1), 4 * madds(&g, &s2));
    }

    #[test]
    fn zero_budget_rejected() {
        assert!(MaddsBudget::new(0).is_err());
        assert!(MaddsBudget::new(10).unwrap().admits(9));
        assert!(!MaddsBudget::new(10).unwrap().admits(10));
    }
}
