//! Model parameters as a tensor pack.
//!
//! Record names mirror the module tree:
//!
//! ```text
//! decoder.stack{i}.weight / .bias
//! decoder.attention.spatial.{global1,global2,local1,local2}.weight / .bias
//! decoder.attention.channel.{shared1,shared2,local1,local2}.weight / .bias
//! decoder.attention.arrangement        length-1 code: 0 spatial->channel,
//!                                      1 channel->spatial, 2 parallel,
//!                                      3 parallel with a shared local branch
//! decoder.projection.weight / .bias
//! predictor.layer{i}.weight / .bias
//! semantic.weight / .bias
//! coefficients.slot{j}
//! ```
//!
//! Biases are rank-1 records. Stride and padding are not stored: every conv
//! here is stride 1 with same padding, recoverable from the kernel extent.

use std::path::Path;

use masklab_core::attention::{Arrangement, ChannelAttention, DualAttention, SpatialAttention};
use masklab_core::decoder::BasesDecoder;
use masklab_core::refine::PointPredictor;
use masklab_core::tensor::ConvParams;
use masklab_core::Tensor;

use crate::error::{CliError, Result};
use crate::lmt::{read_lmt, typed_lookup, write_lmt, LmtScalar, NamedTensor};

#[derive(Debug, Clone)]
pub struct ModelParams<T: LmtScalar> {
    pub decoder: BasesDecoder<T>,
    pub predictor: PointPredictor<T>,
    /// 1x1 head from attended decoder features to one foreground logit map.
    pub semantic: ConvParams<T>,
    /// Per-slot coefficient stacks, each `(K, Rc, Rc)`.
    pub coefficients: Vec<Tensor<T>>,
}

fn arrangement_code(a: Arrangement) -> f64 {
    match a {
        Arrangement::SpatialChannel => 0.0,
        Arrangement::ChannelSpatial => 1.0,
        Arrangement::Parallel => 2.0,
        Arrangement::ParallelShared => 3.0,
    }
}

fn arrangement_from(code: f64, path: &Path) -> Result<Arrangement> {
    match code as i64 {
        0 => Ok(Arrangement::SpatialChannel),
        1 => Ok(Arrangement::ChannelSpatial),
        2 => Ok(Arrangement::Parallel),
        3 => Ok(Arrangement::ParallelShared),
        other => Err(CliError::input(format!(
            "{}: unknown attention arrangement code {other}",
            path.display()
        ))),
    }
}

fn push_conv<T: LmtScalar>(out: &mut Vec<NamedTensor>, prefix: &str, conv: &ConvParams<T>) {
    out.push(NamedTensor::new(
        format!("{prefix}.weight"),
        T::wrap(conv.weights.clone()),
    ));
    let bias = Tensor::new(vec![conv.bias.len()], conv.bias.clone())
        .expect("bias vectors are non-empty");
    out.push(NamedTensor::new(format!("{prefix}.bias"), T::wrap(bias)));
}

fn read_conv<T: LmtScalar>(
    records: &[NamedTensor],
    prefix: &str,
    path: &Path,
) -> Result<ConvParams<T>> {
    let weights = typed_lookup::<T>(records, &format!("{prefix}.weight"), path)?.clone();
    let bias = typed_lookup::<T>(records, &format!("{prefix}.bias"), path)?
        .data()
        .to_vec();
    ConvParams::same(weights, bias).map_err(CliError::from)
}

fn has_record(records: &[NamedTensor], name: &str) -> bool {
    records.iter().any(|r| r.name == name)
}

const SPATIAL_FIELDS: [&str; 4] = ["global1", "global2", "local1", "local2"];
const CHANNEL_FIELDS: [&str; 4] = ["shared1", "shared2", "local1", "local2"];

pub fn model_records<T: LmtScalar>(model: &ModelParams<T>) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (i, conv) in model.decoder.stack.iter().enumerate() {
        push_conv(&mut out, &format!("decoder.stack{i}"), conv);
    }
    let sp = &model.decoder.attention.spatial;
    for (name, conv) in SPATIAL_FIELDS
        .iter()
        .zip([&sp.global1, &sp.global2, &sp.local1, &sp.local2])
    {
        push_conv(&mut out, &format!("decoder.attention.spatial.{name}"), conv);
    }
    let ch = &model.decoder.attention.channel;
    for (name, conv) in CHANNEL_FIELDS
        .iter()
        .zip([&ch.shared1, &ch.shared2, &ch.local1, &ch.local2])
    {
        push_conv(&mut out, &format!("decoder.attention.channel.{name}"), conv);
    }
    let code = Tensor::new(
        vec![1],
        vec![T::from_f64(arrangement_code(model.decoder.attention.arrangement))],
    )
    .expect("single element");
    out.push(NamedTensor::new(
        "decoder.attention.arrangement",
        T::wrap(code),
    ));
    push_conv(&mut out, "decoder.projection", &model.decoder.projection);
    for (i, layer) in model.predictor.layers.iter().enumerate() {
        push_conv(&mut out, &format!("predictor.layer{i}"), layer);
    }
    push_conv(&mut out, "semantic", &model.semantic);
    for (j, coeffs) in model.coefficients.iter().enumerate() {
        out.push(NamedTensor::new(
            format!("coefficients.slot{j}"),
            T::wrap(coeffs.clone()),
        ));
    }
    out
}

pub fn save_model<T: LmtScalar>(path: impl AsRef<Path>, model: &ModelParams<T>) -> Result<()> {
    write_lmt(path, &model_records(model))
}

/// Reads `predictor.layer{i}` records. Works on a full model pack or a
/// predictor-only pack.
pub fn predictor_from_records<T: LmtScalar>(
    records: &[NamedTensor],
    path: &Path,
) -> Result<PointPredictor<T>> {
    let mut layers = Vec::new();
    while has_record(records, &format!("predictor.layer{}.weight", layers.len())) {
        layers.push(read_conv(
            records,
            &format!("predictor.layer{}", layers.len()),
            path,
        )?);
    }
    if layers.is_empty() {
        return Err(CliError::input(format!(
            "{}: no predictor.layer0.weight record",
            path.display()
        )));
    }
    Ok(PointPredictor { layers })
}

pub fn load_model<T: LmtScalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let records = read_lmt(path)?;

    let mut stack = Vec::new();
    while has_record(&records, &format!("decoder.stack{}.weight", stack.len())) {
        stack.push(read_conv(
            &records,
            &format!("decoder.stack{}", stack.len()),
            path,
        )?);
    }
    let sp: Vec<ConvParams<T>> = SPATIAL_FIELDS
        .iter()
        .map(|f| read_conv(&records, &format!("decoder.attention.spatial.{f}"), path))
        .collect::<Result<_>>()?;
    let [g1, g2, l1, l2] = <[_; 4]>::try_from(sp).expect("four fields");
    let ch: Vec<ConvParams<T>> = CHANNEL_FIELDS
        .iter()
        .map(|f| read_conv(&records, &format!("decoder.attention.channel.{f}"), path))
        .collect::<Result<_>>()?;
    let [s1, s2, cl1, cl2] = <[_; 4]>::try_from(ch).expect("four fields");
    let code = typed_lookup::<T>(&records, "decoder.attention.arrangement", path)?;
    let arrangement = arrangement_from(code.data()[0].to_f64(), path)?;

    let decoder = BasesDecoder {
        stack,
        attention: DualAttention {
            spatial: SpatialAttention {
                global1: g1,
                global2: g2,
                local1: l1,
                local2: l2,
            },
            channel: ChannelAttention {
                shared1: s1,
                shared2: s2,
                local1: cl1,
                local2: cl2,
            },
            arrangement,
        },
        projection: read_conv(&records, "decoder.projection", path)?,
    };

    let predictor = predictor_from_records(&records, path)?;
    let semantic = read_conv(&records, "semantic", path)?;

    let mut coefficients = Vec::new();
    loop {
        let name = format!("coefficients.slot{}", coefficients.len());
        if !has_record(&records, &name) {
            break;
        }
        coefficients.push(typed_lookup::<T>(&records, &name, path)?.clone());
    }

    Ok(ModelParams {
        decoder,
        predictor,
        semantic,
        coefficients,
    })
}
