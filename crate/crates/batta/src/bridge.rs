//! Conversions between candle tensors and the core's host-side grids.

use batta_core::FeatureMap;
use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Channels-last `B x H x W x C` tensor to a `B x C x H x W` feature map.
pub fn tokens_to_feature_map(t: &Tensor) -> Result<FeatureMap> {
    let (b, h, w, c) = t.dims4()?;
    let data: Vec<f64> = t
        .permute((0, 3, 1, 2))?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    Ok(FeatureMap::from_vec([b, c, h, w], data)?)
}

/// `B x C x H x W` feature map to a channels-last f32 tensor.
pub fn feature_map_to_tokens(f: &FeatureMap) -> Result<Tensor> {
    let [b, c, h, w] = f.shape();
    let data: Vec<f32> = f.data().iter().map(|&v| v as f32).collect();
    Ok(Tensor::from_vec(data, (b, c, h, w), &Device::Cpu)?
        .permute((0, 2, 3, 1))?
        .contiguous()?)
}
