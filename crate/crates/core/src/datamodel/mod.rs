//! Core value types shared by every stage: label specifications, rasters,
//! samples, resizing policy and persistence.

mod io;
mod labels;
mod raster;

pub use io::{
    load_image, load_instance_raster, load_label_raster, load_mask, load_roi, load_score_map, read_json, save_image,
    save_instance_raster, save_label_raster, save_mask, save_roi, save_score_map, sidecar_path, write_json, ScoreRange,
};
pub use labels::{ClassDef, LabelSpec};
pub use raster::{AnomalyMask, Grid, ImageRgb, InstanceMap, RoiMask, ScoreMap, SemanticMap};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// One dataset record. Every raster that is present shares the image size.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageRgb,
    pub semantic: Option<SemanticMap>,
    pub instances: Option<InstanceMap>,
    pub anomaly: Option<AnomalyMask>,
    pub roi: Option<RoiMask>,
    /// Drivable free space, used to build road-only evaluation regions.
    pub freespace: Option<RoiMask>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: ImageRgb) -> Self {
        Self {
            id: id.into(),
            image,
            semantic: None,
            instances: None,
            anomaly: None,
            roi: None,
            freespace: None,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    /// Check that all present rasters share the image size.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        let checks = [
            ("semantic", self.semantic.as_ref().map(|m| m.dims())),
            ("instances", self.instances.as_ref().map(|m| m.dims())),
            ("anomaly", self.anomaly.as_ref().map(|m| m.dims())),
            ("roi", self.roi.as_ref().map(|m| m.dims())),
            ("freespace", self.freespace.as_ref().map(|m| m.dims())),
        ];
        for (name, dims) in checks {
            if let Some(dd) = dims {
                if dd != d {
                    return Err(Error::shape(format!(
                        "sample {}: {name} raster is {}x{}, image is {}x{}",
                        self.id, dd.0, dd.1, d.0, d.1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Resize a sample: bilinear for the image, nearest-neighbour for every
/// label-like raster so no new label values appear.
pub fn resize_sample(sample: &Sample, width: usize, height: usize) -> Result<Sample> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "target size {width}x{height} must be at least 1x1"
        )));
    }
    sample.validate()?;
    if sample.dims() == (width, height) {
        return Ok(sample.clone());
    }
    Ok(Sample {
        id: sample.id.clone(),
        image: sample.image.resize_bilinear(width, height),
        semantic: sample
            .semantic
            .as_ref()
            .map(|m| SemanticMap::from_grid_unchecked(m.grid().resize_nearest(width, height))),
        instances: sample
            .instances
            .as_ref()
            .map(|m| InstanceMap::new(m.grid().resize_nearest(width, height))),
        anomaly: sample
            .anomaly
            .as_ref()
            .map(|m| AnomalyMask::new(m.grid().resize_nearest(width, height)))
            .transpose()?,
        roi: sample
            .roi
            .as_ref()
            .map(|m| RoiMask::new(m.grid().resize_nearest(width, height))),
        freespace: sample
            .freespace
            .as_ref()
            .map(|m| RoiMask::new(m.grid().resize_nearest(width, height))),
    })
}

/// One-hot encode a semantic map into a `num_classes × H × W` tensor;
/// void pixels are zero in every channel.
pub fn one_hot(sem: &SemanticMap, spec: &LabelSpec) -> Result<Tensor> {
    let (w, h) = sem.dims();
    let c = spec.num_classes();
    let mut t = Tensor::zeros(c, h, w);
    let n = w * h;
    for (i, &lab) in sem.labels().iter().enumerate() {
        if spec.is_known(lab) {
            t.data_mut()[lab as usize * n + i] = 1.0;
        } else if lab != spec.void_id() {
            return Err(Error::UndeclaredLabel { value: lab as u32 });
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec3() -> LabelSpec {
        LabelSpec::new(
            vec![
                ClassDef::new("road", 0, false, [128, 64, 128]),
                ClassDef::new("car", 1, true, [0, 0, 142]),
                ClassDef::new("person", 2, true, [220, 20, 60]),
            ],
            255,
        )
        .unwrap()
    }

    #[test]
    fn one_hot_examples() {
        let s = spec3();
        let m = SemanticMap::new(Grid::filled(1, 1, 2), &s).unwrap();
        assert_eq!(one_hot(&m, &s).unwrap().data(), &[0.0, 0.0, 1.0]);

        let s2 = LabelSpec::new(
            vec![
                ClassDef::new("a", 0, true, [0; 3]),
                ClassDef::new("b", 1, false, [0; 3]),
            ],
            255,
        )
        .unwrap();
        let m = SemanticMap::new(Grid::from_vec(2, 1, vec![255, 0]).unwrap(), &s2).unwrap();
        let t = one_hot(&m, &s2).unwrap();
        // pixel 0 (void) -> [0,0]; pixel 1 -> [1,0]
        assert_eq!(t.get(0, 0, 0), 0.0);
        assert_eq!(t.get(1, 0, 0), 0.0);
        assert_eq!(t.get(0, 0, 1), 1.0);
        assert_eq!(t.get(1, 0, 1), 0.0);
    }

    #[test]
    fn one_hot_rejects_undeclared_labels() {
        let m = SemanticMap::from_grid_unchecked(Grid::filled(1, 1, 7));
        assert!(matches!(
            one_hot(&m, &spec3()),
            Err(Error::UndeclaredLabel { value: 7 })
        ));
        assert!(SemanticMap::new(Grid::filled(1, 1, 7), &spec3()).is_err());
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = ImageRgb::from_fn(6, 4, |x, y| [x as f64 / 6.0, y as f64 / 4.0, 0.5]);
        let mut s = Sample::new("a", img);
        s.semantic = Some(SemanticMap::from_grid_unchecked(Grid::from_fn(6, 4, |x, _| {
            (x % 2) as u8
        })));
        assert_eq!(resize_sample(&s, 6, 4).unwrap(), s);
    }

    #[test]
    fn resize_downscales_like_cityscapes() {
        let img = ImageRgb::new(2048, 1024);
        let mut s = Sample::new("big", img);
        s.anomaly = Some(AnomalyMask::all_normal(2048, 1024));
        let r = resize_sample(&s, 1024, 512).unwrap();
        assert_eq!(r.dims(), (1024, 512));
        assert_eq!(r.anomaly.unwrap().dims(), (1024, 512));
    }

    #[test]
    fn nearest_resize_keeps_label_set() {
        let g = Grid::from_vec(4, 4, vec![0u8, 1, 1, 0, 1, 0, 0, 1, 0, 0, 1, 1, 1, 1, 0, 0]).unwrap();
        let r = g.resize_nearest(2, 2);
        assert!(r.as_slice().iter().all(|v| *v <= 1));
        assert!(resize_sample(&Sample::new("x", ImageRgb::new(2, 2)), 0, 3).is_err());
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let img = ImageRgb::from_fn(5, 7, |_, _| [0.25, 0.5, 0.75]);
        let r = img.resize_bilinear(3, 11);
        for y in 0..11 {
            for x in 0..3 {
                let p = r.get(x, y);
                assert!((p[0] - 0.25).abs() < 1e-12 && (p[2] - 0.75).abs() < 1e-12);
            }
        }
    }
}
