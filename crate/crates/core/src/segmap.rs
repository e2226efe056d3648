//! Patch distributions to label masks, and IoU scoring.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::simplex;

/// Layout of a batch of patches: `num_tiles` tiles of `rows x cols` patches,
/// tile-major and raster order (top-left first) inside each tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_px: usize,
    pub num_tiles: usize,
}

impl PatchGrid {
    pub fn patches_per_tile(&self) -> usize {
        self.rows * self.cols
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_tile() * self.num_tiles
    }

    /// Tile that patch row `i` belongs to.
    pub fn tile_index(&self, i: usize) -> usize {
        i / self.patches_per_tile()
    }

    pub fn tile_shape(&self) -> (usize, usize) {
        (self.rows * self.patch_px, self.cols * self.patch_px)
    }
}

/// Paint each tile's patch labels as `patch_px`-sized blocks.
pub fn labels_to_masks(labels: &[usize], grid: &PatchGrid) -> Result<Vec<Array2<u8>>> {
    if labels.len() != grid.num_patches() {
        return Err(Error::Shape(format!(
            "{} patch labels for a grid of {} patches",
            labels.len(),
            grid.num_patches()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > u8::MAX as usize) {
        return Err(Error::LabelRange {
            label: bad as u32,
            classes: 256,
        });
    }
    let per_tile = grid.patches_per_tile();
    let px = grid.patch_px;
    let masks = labels
        .chunks(per_tile)
        .map(|tile| {
            let mut mask = Array2::<u8>::zeros(grid.tile_shape());
            for (j, &label) in tile.iter().enumerate() {
                let (r, c) = (j / grid.cols, j % grid.cols);
                mask.slice_mut(s![r * px..(r + 1) * px, c * px..(c + 1) * px])
                    .fill(label as u8);
            }
            mask
        })
        .collect();
    Ok(masks)
}

/// Argmax per patch (ties to the lowest class), upsampled by block fill.
pub fn assemble_masks(z: ArrayView2<f64>, grid: &PatchGrid) -> Result<Vec<Array2<u8>>> {
    if z.nrows() != grid.num_patches() {
        return Err(Error::Shape(format!(
            "{} probability rows for a grid of {} patches",
            z.nrows(),
            grid.num_patches()
        )));
    }
    let labels: Vec<usize> = z.axis_iter(Axis(0)).map(simplex::argmax).collect();
    labels_to_masks(&labels, grid)
}

/// Rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn from_counts(counts: Array2<u64>) -> Result<Self> {
        if counts.nrows() != counts.ncols() {
            return Err(Error::Shape(format!(
                "confusion matrix must be square, got {:?}",
                counts.dim()
            )));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        self.counts += &other.counts;
        Ok(())
    }

    /// Add every pixel of `pred` against `gt`, skipping `ignore_label` pixels
    /// of the ground truth.
    pub fn accumulate(
        &mut self,
        pred: ArrayView2<u8>,
        gt: ArrayView2<u8>,
        ignore_label: Option<u8>,
    ) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction is {:?} but ground truth is {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let c = self.num_classes();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if Some(g) == ignore_label {
                continue;
            }
            for label in [g, p] {
                if label as usize >= c {
                    return Err(Error::LabelRange {
                        label: label as u32,
                        classes: c,
                    });
                }
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }
}

pub fn accumulate_confusion(
    pred: ArrayView2<u8>,
    gt: ArrayView2<u8>,
    num_classes: usize,
    ignore_label: Option<u8>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt, ignore_label)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouScores {
    /// `None` for classes that appear in neither prediction nor ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub excluded: Vec<usize>,
}

pub fn iou_scores(cm: &ConfusionMatrix) -> IouScores {
    let c = cm.num_classes();
    let counts = &cm.counts;
    let mut per_class = Vec::with_capacity(c);
    let mut excluded = Vec::new();
    for k in 0..c {
        let tp = counts[[k, k]];
        let fn_ = counts.row(k).sum() - tp;
        let fp = counts.column(k).sum() - tp;
        let union = tp + fp + fn_;
        if union == 0 {
            per_class.push(None);
            excluded.push(k);
        } else {
            per_class.push(Some(tp as f64 / union as f64));
        }
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if included.is_empty() {
        0.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    IouScores {
        per_class,
        miou,
        excluded,
    }
}

/// Fraction of matching labels.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

/// mIoU of patch-level label vectors.
pub fn label_miou(pred: &[usize], truth: &[usize], num_classes: usize) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let mut counts = Array2::<u64>::zeros((num_classes, num_classes));
    for (&p, &g) in pred.iter().zip(truth) {
        counts[[g, p]] += 1;
    }
    iou_scores(&ConfusionMatrix { counts }).miou
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn block_fill() {
        let grid = PatchGrid {
            rows: 2,
            cols: 2,
            patch_px: 2,
            num_tiles: 1,
        };
        let z = array![[0.9, 0.1], [0.2, 0.8], [0.4, 0.6], [0.7, 0.3]];
        let masks = assemble_masks(z.view(), &grid).unwrap();
        assert_eq!(masks.len(), 1);
        assert_eq!(
            masks[0],
            array![[0u8, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]]
        );
    }

    #[test]
    fn tie_goes_to_lowest_class() {
        let grid = PatchGrid {
            rows: 1,
            cols: 1,
            patch_px: 1,
            num_tiles: 1,
        };
        let masks = assemble_masks(array![[0.5, 0.5]].view(), &grid).unwrap();
        assert_eq!(masks[0], array![[0u8]]);
    }

    #[test]
    fn full_tile_resolution() {
        let grid = PatchGrid {
            rows: 28,
            cols: 28,
            patch_px: 16,
            num_tiles: 2,
        };
        let z = simplex::uniform(grid.num_patches(), 3);
        let masks = assemble_masks(z.view(), &grid).unwrap();
        assert_eq!(masks.len(), 2);
        assert_eq!(masks[1].dim(), (448, 448));
        assert_eq!(grid.tile_index(784), 1);
    }

    #[test]
    fn wrong_row_count() {
        let grid = PatchGrid {
            rows: 2,
            cols: 2,
            patch_px: 1,
            num_tiles: 1,
        };
        assert!(matches!(
            assemble_masks(simplex::uniform(3, 2).view(), &grid),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn confusion_hand_count() {
        let gt = array![[0u8, 0], [1, 1]];
        let pred = array![[0u8, 1], [1, 1]];
        let cm = accumulate_confusion(pred.view(), gt.view(), 2, None).unwrap();
        assert_eq!(cm.counts(), &array![[1u64, 1], [0, 2]]);
        let s = iou_scores(&cm);
        assert_eq!(s.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((s.miou - 0.583_333_333_333_333_4).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        let gt = array![[0u8, 1], [2, 1]];
        let cm = accumulate_confusion(gt.view(), gt.view(), 3, None).unwrap();
        assert_eq!(cm.counts(), &Array2::from_diag(&array![1u64, 2, 1]));
        let s = iou_scores(&cm);
        assert_eq!(s.miou, 1.0);

        let gt = array![[1u8, 1], [0, 0]];
        let pred = array![[0u8, 0], [1, 1]];
        let cm = accumulate_confusion(pred.view(), gt.view(), 2, None).unwrap();
        assert_eq!(iou_scores(&cm).per_class[1], Some(0.0));
    }

    #[test]
    fn ignore_and_range() {
        let gt = array![[0u8, 255], [1, 255]];
        let pred = array![[0u8, 1], [1, 0]];
        let cm = accumulate_confusion(pred.view(), gt.view(), 2, Some(255)).unwrap();
        assert_eq!(cm.total(), 2);
        let err = accumulate_confusion(pred.view(), gt.view(), 2, None).unwrap_err();
        assert!(matches!(err, Error::LabelRange { label: 255, classes: 2 }));
        let err = accumulate_confusion(array![[5u8]].view(), array![[0u8]].view(), 2, None);
        assert!(matches!(err, Err(Error::LabelRange { label: 5, .. })));
        let err = accumulate_confusion(array![[0u8]].view(), array![[0u8, 0]].view(), 2, None);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn absent_classes_excluded() {
        let cm = accumulate_confusion(array![[0u8, 0]].view(), array![[0u8, 0]].view(), 3, None)
            .unwrap();
        let s = iou_scores(&cm);
        assert_eq!(s.excluded, vec![1, 2]);
        assert_eq!(s.per_class, vec![Some(1.0), None, None]);
        assert_eq!(s.miou, 1.0);
    }

    proptest! {
        #[test]
        fn iou_invariant_under_relabeling(
            pixels in prop::collection::vec((0u8..4, 0u8..4), 1..64),
            perm_seed in 0usize..24,
        ) {
            let mut perm: Vec<u8> = vec![0, 1, 2, 3];
            // k-th permutation of 4 elements
            let mut k = perm_seed;
            let mut out = Vec::new();
            for n in (1..=4usize).rev() {
                let f: usize = (1..n).product();
                out.push(perm.remove(k / f));
                k %= f;
            }
            let n = pixels.len();
            let gt = Array2::from_shape_vec((1, n), pixels.iter().map(|p| p.0).collect()).unwrap();
            let pr = Array2::from_shape_vec((1, n), pixels.iter().map(|p| p.1).collect()).unwrap();
            let a = iou_scores(&accumulate_confusion(pr.view(), gt.view(), 4, None).unwrap());
            let gt2 = gt.mapv(|v| out[v as usize]);
            let pr2 = pr.mapv(|v| out[v as usize]);
            let b = iou_scores(&accumulate_confusion(pr2.view(), gt2.view(), 4, None).unwrap());
            prop_assert!((a.miou - b.miou).abs() < 1e-12);
            for c in 0..4 {
                prop_assert_eq!(a.per_class[c], b.per_class[out[c] as usize]);
            }
            prop_assert_eq!(a.excluded.len(), b.excluded.len());
        }

        #[test]
        fn masks_only_contain_argmax_labels(labels in prop::collection::vec(0usize..5, 6)) {
            let grid = PatchGrid { rows: 2, cols: 3, patch_px: 3, num_tiles: 1 };
            let z = simplex::one_hot(&labels, 5);
            let masks = assemble_masks(z.view(), &grid).unwrap();
            for v in masks[0].iter() {
                prop_assert!(labels.contains(&(*v as usize)));
            }
            let cm = accumulate_confusion(masks[0].view(), masks[0].view(), 5, None).unwrap();
            prop_assert_eq!(cm.total() as usize, 6 * 9);
        }
    }
}
