//! Reconstruction checkpoints: a JSON header (grid shape, sensor-model
//! parameters, version) followed by the four field channels as f32
//! little-endian blobs.

use std::io::{Read, Write};
use std::path::Path;

use pbl_core::field::VoxelField;
use pbl_core::math::Vec3;
use pbl_core::sensor::NearModel;
use pbl_core::{DistanceParams, IntensityParams};
use serde::{Deserialize, Serialize};

use crate::{config_err, Result};

const MAGIC: &[u8; 4] = b"PBLC";
const VERSION: u32 = 1;

/// Serializable mirror of [`IntensityParams`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsDoc {
    pub s: f64,
    pub q: f64,
    pub d_near: f64,
    pub s_eta: f64,
    pub q_eta: f64,
    pub k_steep: f64,
    #[serde(default = "default_near_model")]
    pub near_model: String,
    #[serde(default)]
    pub lens_delta: f64,
    pub laser_powers: Vec<f64>,
    pub incidence_a: f64,
    pub incidence_b: f64,
    #[serde(default)]
    pub reflect_target: f64,
    #[serde(default = "default_one")]
    pub reflect_scale: f64,
}

fn default_near_model() -> String {
    "fractional_power".into()
}

fn default_one() -> f64 {
    1.0
}

impl ParamsDoc {
    pub fn from_params(p: &IntensityParams) -> Self {
        ParamsDoc {
            s: p.distance.s,
            q: p.distance.q,
            d_near: p.distance.d_near,
            s_eta: p.distance.s_eta,
            q_eta: p.distance.q_eta,
            k_steep: p.distance.k_steep,
            near_model: match p.distance.near_model {
                NearModel::FractionalPower => "fractional_power".into(),
                NearModel::LensDefocus => "lens_defocus".into(),
            },
            lens_delta: p.distance.lens_delta,
            laser_powers: p.laser_powers.clone(),
            incidence_a: p.incidence_a,
            incidence_b: p.incidence_b,
            reflect_target: p.reflect_target,
            reflect_scale: p.reflect_scale,
        }
    }

    pub fn to_params(&self) -> Result<IntensityParams> {
        let near_model = match self.near_model.as_str() {
            "fractional_power" => NearModel::FractionalPower,
            "lens_defocus" => NearModel::LensDefocus,
            other => return Err(config_err(format!("unknown near model {other:?}"))),
        };
        Ok(IntensityParams {
            distance: DistanceParams {
                s: self.s,
                q: self.q,
                d_near: self.d_near,
                s_eta: self.s_eta,
                q_eta: self.q_eta,
                k_steep: self.k_steep,
                near_model,
                lens_delta: self.lens_delta,
            },
            laser_powers: self.laser_powers.clone(),
            incidence_a: self.incidence_a,
            incidence_b: self.incidence_b,
            reflect_target: self.reflect_target,
            reflect_scale: self.reflect_scale,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dims: [usize; 3],
    cell_size: f64,
    origin: [f64; 3],
    channels: Vec<String>,
    params: ParamsDoc,
}

pub fn save_checkpoint(path: &Path, field: &VoxelField, params: &IntensityParams) -> Result<()> {
    let header = Header {
        format: "pbl-checkpoint".into(),
        version: VERSION,
        dims: field.dims,
        cell_size: field.cell_size,
        origin: [field.origin.x, field.origin.y, field.origin.z],
        channels: pbl_core::field::CHANNELS.iter().map(|s| s.to_string()).collect(),
        params: ParamsDoc::from_params(params),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut file = std::fs::File::create(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    file.write_all(MAGIC)?;
    file.write_all(&(json.len() as u32).to_le_bytes())?;
    file.write_all(&json)?;
    let mut blob = Vec::with_capacity(field.cell_count() * 16);
    for channel in [&field.density, &field.intensity, &field.reflectivity, &field.drop] {
        for v in channel {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    file.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(VoxelField, IntensityParams)> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(config_err(format!("{}: not a checkpoint file", path.display())));
    }
    let mut len = [0u8; 4];
    file.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    file.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| config_err(format!("{}: bad header: {e}", path.display())))?;
    if header.format != "pbl-checkpoint" || header.version != VERSION {
        return Err(config_err(format!(
            "{}: unsupported checkpoint version {} ({})",
            path.display(),
            header.version,
            header.format
        )));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;
    if blob.len() != n * 4 * 4 {
        return Err(config_err(format!(
            "{}: blob length {} does not match {} cells x 4 channels",
            path.display(),
            blob.len(),
            n
        )));
    }
    let mut field = VoxelField::new(
        header.dims,
        header.cell_size,
        Vec3::new(header.origin[0], header.origin[1], header.origin[2]),
    );
    let channels: [&mut Vec<f64>; 4] =
        [&mut field.density, &mut field.intensity, &mut field.reflectivity, &mut field.drop];
    for (c, channel) in channels.into_iter().enumerate() {
        for i in 0..n {
            let o = (c * n + i) * 4;
            channel[i] = f32::from_le_bytes(blob[o..o + 4].try_into().unwrap()) as f64;
        }
    }
    Ok((field, header.params.to_params()?))
}
