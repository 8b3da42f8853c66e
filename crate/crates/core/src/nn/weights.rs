//! `CTSW1` weight blobs: magic, u64 spec hash, u32 tensor count, then per
//! tensor a u32 rank, u32 dims and little-endian f32 values.

use super::{NetworkSpec, NnError, Parameters, Result, Tensor};

const MAGIC: &[u8; 5] = b"CTSW1";

/// 64-bit FNV-1a hash of the spec's canonical JSON.
pub fn spec_hash(spec: &NetworkSpec) -> u64 {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    json.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn save_weights(spec: &NetworkSpec, params: &Parameters<f32>) -> Result<Vec<u8>> {
    params.check_shapes(spec)?;
    let mut out = Vec::with_capacity(17 + params.count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&spec_hash(spec).to_le_bytes());
    out.extend_from_slice(&(params.iter().count() as u32).to_le_bytes());
    for t in params.iter() {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_weights(bytes: &[u8], spec: &NetworkSpec) -> Result<Parameters<f32>> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != b"CTSW" {
        return Err(NnError::Corrupt("missing CTSW magic".into()));
    }
    if &bytes[..5] != MAGIC {
        return Err(NnError::VersionMismatch(String::from_utf8_lossy(&bytes[..5]).into_owned()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let hash = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    if hash != spec_hash(spec) {
        return Err(NnError::ShapeMismatch("weights were saved for a different network spec".into()));
    }
    let expected = spec.param_shapes();
    let count = r.u32()? as usize;
    if count != expected.iter().map(Vec::len).sum::<usize>() {
        return Err(NnError::ShapeMismatch(format!("{count} tensors in blob")));
    }
    let mut layers = Vec::with_capacity(expected.len());
    for shapes in &expected {
        let mut tensors = Vec::with_capacity(shapes.len());
        for want in shapes {
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(NnError::Corrupt(format!("tensor rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if &shape != want {
                return Err(NnError::ShapeMismatch(format!("tensor {shape:?}, spec wants {want:?}")));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| NnError::Corrupt("tensor too large".into()))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(NnError::Corrupt("non-finite weight".into()));
            }
            tensors.push(Tensor::new(shape, data)?);
        }
        layers.push(tensors);
    }
    if r.pos != bytes.len() {
        return Err(NnError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Parameters { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let spec = NetworkSpec::residual_classifier(16);
        let p = Parameters::<f32>::init(&spec, 77);
        let blob = save_weights(&spec, &p).unwrap();
        assert_eq!(&blob[..5], b"CTSW1");
        assert_eq!(load_weights(&blob, &spec).unwrap(), p);
    }

    #[test]
    fn truncated_and_padded_blobs_are_corrupt() {
        let spec = NetworkSpec::residual_classifier(16);
        let blob = save_weights(&spec, &Parameters::init(&spec, 1)).unwrap();
        for cut in [3, 10, 20, blob.len() - 1] {
            assert!(matches!(load_weights(&blob[..cut], &spec), Err(NnError::Corrupt(_))), "cut {cut}");
        }
        let mut long = blob.clone();
        long.push(0);
        assert!(matches!(load_weights(&long, &spec), Err(NnError::Corrupt(_))));
    }

    #[test]
    fn other_spec_or_version_rejected() {
        let spec = NetworkSpec::residual_classifier(16);
        let blob = save_weights(&spec, &Parameters::init(&spec, 1)).unwrap();
        let mut other = spec.clone();
        other.layers[2] = crate::nn::LayerSpec::Residual { cin: 16, cout: 16, stride: 1 };
        other.grad_cam_layer = 3;
        assert!(matches!(load_weights(&blob, &other), Err(NnError::ShapeMismatch(_))));
        let mut v2 = blob.clone();
        v2[4] = b'2';
        assert!(matches!(load_weights(&v2, &spec), Err(NnError::VersionMismatch(_))));
    }
}
