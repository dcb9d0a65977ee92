use std::path::Path;
use std::sync::Arc;

use tract_onnx::pb;
use tract_onnx::prelude::*;

use super::{ModelManifest, Network, NetworkOutputs, CONV_FEATURES, LATENT, LOGITS};
use crate::error::{Error, Result};
use crate::types::{FeatureMap3D, ImageTensor, Matrix};

const FLOAT: i32 = 1;

/// ONNX graph executed with tract, exposing the three named outputs.
pub struct OnnxNetwork {
    plan: Arc<TypedRunnableModel>,
    input_shape: [usize; 3],
    has_conv: bool,
}

fn backend(e: impl std::fmt::Display) -> Error {
    Error::Backend(e.to_string())
}

fn initializer<'a>(graph: &'a pb::GraphProto, name: &str) -> Result<&'a pb::TensorProto> {
    graph
        .initializer
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Contract(format!("initializer `{name}` not found in graph")))
}

fn float_values(t: &pb::TensorProto) -> Result<Vec<f32>> {
    if t.data_type != FLOAT {
        return Err(Error::Contract(format!(
            "initializer `{}` is not float32 (type {})",
            t.name, t.data_type
        )));
    }
    if !t.float_data.is_empty() {
        return Ok(t.float_data.clone());
    }
    if t.raw_data.len() % 4 != 0 {
        return Err(Error::Contract(format!("initializer `{}` has ragged raw data", t.name)));
    }
    Ok(t.raw_data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Reads the final layer as `d_latent x n_classes`, honouring Gemm's `transB`.
fn final_layer(graph: &pb::GraphProto, manifest: &ModelManifest) -> Result<(Matrix<f32>, Vec<f32>)> {
    let wname = &manifest.final_layer.weight_initializer;
    let w = initializer(graph, wname)?;
    let b = initializer(graph, &manifest.final_layer.bias_initializer)?;
    if w.dims.len() != 2 {
        return Err(Error::Contract(format!("final weight `{wname}` must be 2-D, has dims {:?}", w.dims)));
    }
    let (r, c) = (w.dims[0] as usize, w.dims[1] as usize);
    let consumer = graph
        .node
        .iter()
        .find(|n| n.input.get(1).map(String::as_str) == Some(wname.as_str()))
        .ok_or_else(|| Error::Contract(format!("final weight `{wname}` is not a matmul operand")))?;
    let transposed = match consumer.op_type.as_str() {
        "Gemm" => consumer.attribute.iter().any(|a| a.name == "transB" && a.i != 0),
        "MatMul" => false,
        other => {
            return Err(Error::Contract(format!(
                "final weight `{wname}` consumed by unsupported op {other}"
            )))
        }
    };
    let raw = Matrix::new(float_values(w)?, r, c)?;
    let weights = if transposed { raw.transposed() } else { raw };
    Ok((weights, float_values(b)?))
}

impl OnnxNetwork {
    /// Loads the graph, selects the contract outputs and reads `W`, `b`.
    pub fn load(path: &Path, manifest: &ModelManifest) -> Result<(Self, Matrix<f32>, Vec<f32>)> {
        let onnx = tract_onnx::onnx();
        let proto = onnx
            .proto_model_for_path(path)
            .map_err(|e| Error::Backend(format!("{}: {e}", path.display())))?;
        let graph = proto
            .graph
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no graph".into()))?;

        let declared: Vec<&str> = graph.output.iter().map(|o| o.name.as_str()).collect();
        let mut wanted = vec![LATENT, LOGITS];
        if manifest.convolutional {
            wanted.insert(0, CONV_FEATURES);
        }
        let missing: Vec<&str> = wanted.iter().copied().filter(|w| !declared.contains(w)).collect();
        if !missing.is_empty() {
            return Err(Error::Contract(format!("graph is missing named outputs: {}", missing.join(", "))));
        }
        let (weights, bias) = final_layer(graph, manifest)?;

        let [c, h, w] = manifest.input_shape;
        let plan = onnx
            .model_for_proto_model(&proto)
            .and_then(|m| m.with_input_fact(0, f32::fact([1, c, h, w]).into()))
            .and_then(|m| m.with_outputs_by_name(wanted.iter().copied()))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(backend)?;
        let net = OnnxNetwork {
            plan,
            input_shape: manifest.input_shape,
            has_conv: manifest.convolutional,
        };
        Ok((net, weights, bias))
    }
}

fn to_vec(value: &TValue) -> Result<(Vec<usize>, Vec<f32>)> {
    let view = value.to_plain_array_view::<f32>().map_err(backend)?;
    Ok((view.shape().to_vec(), view.iter().copied().collect()))
}

impl Network for OnnxNetwork {
    fn run(&self, image: &ImageTensor) -> Result<NetworkOutputs> {
        let [c, h, w] = self.input_shape;
        let input = Tensor::from_shape(&[1, c, h, w], image.pixels()).map_err(backend)?;
        let outputs = self.plan.run(tvec!(input.into())).map_err(backend)?;
        let mut it = outputs.iter();
        let conv_features = if self.has_conv {
            let (shape, data) = to_vec(it.next().expect("conv output selected"))?;
            if shape.len() != 4 || shape[0] != 1 {
                return Err(Error::Contract(format!(
                    "`{CONV_FEATURES}` must be 1xDxHxW, got {shape:?}"
                )));
            }
            Some(FeatureMap3D::from_channel_major(&data, shape[1], shape[2], shape[3])?)
        } else {
            None
        };
        let (_, latent) = to_vec(it.next().expect("latent selected"))?;
        let (_, logits) = to_vec(it.next().expect("logits selected"))?;
        Ok(NetworkOutputs {
            conv_features,
            latent,
            logits,
        })
    }
}
