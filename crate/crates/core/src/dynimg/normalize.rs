use serde::{Deserialize, Serialize};

use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormalizeMode {
    #[default]
    MinMaxPerChannel,
    MinMaxGlobal,
}

/// Min-max scaling into `[0, 1]`. A constant channel (or a constant raster
/// in global mode) maps to 0.5.
pub fn normalize(raster: &Raster, mode: NormalizeMode) -> Raster {
    let mut out = raster.clone();
    match mode {
        NormalizeMode::MinMaxPerChannel => {
            for c in 0..out.channels {
                rescale(out.plane_mut(c));
            }
        }
        NormalizeMode::MinMaxGlobal => rescale(&mut out.data),
    }
    out
}

fn rescale(values: &mut [f32]) {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = f64::from(hi) - f64::from(lo);
    if span.is_nan() || span <= 0.0 {
        values.iter_mut().for_each(|v| *v = 0.5);
        return;
    }
    for v in values.iter_mut() {
        *v = ((f64::from(*v) - f64::from(lo)) / span) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_range() {
        let r = Raster::new(1, 1, 3, vec![-4.0, 0.0, 4.0]).unwrap();
        assert_eq!(normalize(&r, NormalizeMode::MinMaxPerChannel).data, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_maps_to_half() {
        let r = Raster::filled(2, 3, 3, -1.5);
        assert!(normalize(&r, NormalizeMode::MinMaxPerChannel)
            .data
            .iter()
            .all(|&v| v == 0.5));
        assert!(normalize(&r, NormalizeMode::MinMaxGlobal)
            .data
            .iter()
            .all(|&v| v == 0.5));
    }

    #[test]
    fn per_channel_vs_global() {
        let r = Raster::new(2, 1, 2, vec![0.0, 1.0, 10.0, 20.0]).unwrap();
        assert_eq!(
            normalize(&r, NormalizeMode::MinMaxPerChannel).data,
            vec![0.0, 1.0, 0.0, 1.0]
        );
        assert_eq!(
            normalize(&r, NormalizeMode::MinMaxGlobal).data,
            vec![0.0, 0.05, 0.5, 1.0]
        );
        // one constant channel next to a varying one
        let r = Raster::new(2, 1, 2, vec![3.0, 3.0, 1.0, 2.0]).unwrap();
        assert_eq!(
            normalize(&r, NormalizeMode::MinMaxPerChannel).data,
            vec![0.5, 0.5, 0.0, 1.0]
        );
    }
}
