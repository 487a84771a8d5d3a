//! Whole-scan inference inside a bounding-box ROI.

use super::{NetError, Network, Result};
use crate::nn3d::Tensor;
use crate::volume::{crop, paste, BoundingBox, Mask, Volume};

#[derive(Debug, Clone)]
pub struct Segmentation {
    /// `P > threshold`, always inside the ROI.
    pub mask: Mask,
    /// Tract probability on the full grid, zero outside the ROI.
    pub probability: Volume,
}

/// Crop `input` to `roi`, run the network in eval mode and paste the tract
/// probability back onto the full grid.
pub fn segment(net: &mut Network<f32>, input: &Volume, roi: &BoundingBox, threshold: f32) -> Result<Segmentation> {
    let dims = input.spatial_dims();
    if !roi.fits_in(dims) {
        return Err(NetError::InvalidConfig(format!("ROI {roi:?} outside volume {dims:?}")));
    }
    net.config().check_roi(roi.dims())?;
    let patch = crop(input, roi)?;
    let [nx, ny, nz] = patch.spatial_dims();
    let x = Tensor::from_vec([1, patch.channels(), nz, ny, nx], patch.into_data())?;
    let p = net.predict(&x)?;
    let prob_patch = Volume::from_data(&[nx, ny, nz], p.channel(0, 1).to_vec())?;
    let grid = input.zeros_like_grid(1);
    let probability = paste(&grid, &prob_patch, roi)?;
    let mask = Mask::from_threshold(&probability, threshold);
    Ok(Segmentation { mask, probability })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netbuilder::{build, ArchConfig};

    fn zero_logit_net() -> Network<f32> {
        let mut net = build::<f32>(&ArchConfig {
            depth: 2,
            base_channels: 2,
            ..Default::default()
        })
        .unwrap();
        let head = net.head_mut();
        head.weight.value.iter_mut().for_each(|v| *v = 0.0);
        head.bias.value.iter_mut().for_each(|v| *v = 0.0);
        net
    }

    #[test]
    fn half_probability_is_background() {
        let mut net = zero_logit_net();
        let input = Volume::from_data(&[10, 9, 8, 6], vec![0.3; 10 * 9 * 8 * 6]).unwrap();
        let roi = BoundingBox::new([1, 0, 2], [8, 7, 5]).unwrap();
        let s = segment(&mut net, &input, &roi, 0.5).unwrap();
        assert_eq!(s.mask.count(), 0);
        for z in 0..8 {
            for y in 0..9 {
                for x in 0..10 {
                    let p = s.probability.get(x, y, z, 0);
                    assert_eq!(p, if roi.contains(x, y, z) { 0.5 } else { 0.0 });
                }
            }
        }
        // a lower threshold selects exactly the ROI
        let s = segment(&mut net, &input, &roi, 0.4).unwrap();
        assert_eq!(s.mask.count(), roi.n_voxels());
    }

    #[test]
    fn mask_stays_inside_roi() {
        let mut net = zero_logit_net();
        net.head_mut().bias.value[1] = 5.0;
        let input = Volume::from_data(&[12, 12, 12, 6], vec![1.0; 6 * 1728]).unwrap();
        let roi = BoundingBox::new([2, 2, 2], [9, 9, 9]).unwrap();
        let s = segment(&mut net, &input, &roi, 0.5).unwrap();
        assert_eq!(s.mask.count(), roi.n_voxels());
        for z in 0..12 {
            for y in 0..12 {
                for x in 0..12 {
                    assert!(!s.mask.at_xyz(x, y, z) || roi.contains(x, y, z));
                }
            }
        }
        let bad = BoundingBox::new([0, 0, 0], [2, 2, 2]).unwrap();
        assert!(segment(&mut net, &input, &bad, 0.5).is_err());
    }
}
