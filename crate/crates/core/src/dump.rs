//! Binary tensor dumps.
//!
//! ```text
//! "SAES"  u16 version  u32 tensor_count
//! per tensor: u32 name_len, name (utf-8), u32 rank, rank × u64 dims,
//!             row-major f32 values
//! ```
//!
//! Every integer and float is little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::router::{Mlp, RouterParams};
use crate::sae::SaeParams;

pub const MAGIC: &[u8; 4] = b"SAES";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor `{name}`: dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }

    pub fn from_matrix(name: &str, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().iter().map(|x| *x as f32).collect(),
        }
    }

    pub fn from_vector(name: &str, v: &Vector) -> Self {
        Self {
            name: name.into(),
            dims: vec![v.dim()],
            data: v.as_slice().iter().map(|x| *x as f32).collect(),
        }
    }

    pub fn scalar(name: &str, value: f64) -> Self {
        Self {
            name: name.into(),
            dims: vec![],
            data: vec![value as f32],
        }
    }

    fn widened(&self) -> Vec<f64> {
        self.data.iter().map(|x| f64::from(*x)).collect()
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::new(r, c, self.widened()),
            _ => Err(Error::Format(format!("tensor `{}` is not rank 2", self.name))),
        }
    }

    pub fn to_vector(&self) -> Result<Vector> {
        match self.dims[..] {
            [_] => Vector::new(self.widened()),
            _ => Err(Error::Format(format!("tensor `{}` is not rank 1", self.name))),
        }
    }

    pub fn to_scalar(&self) -> Result<f64> {
        match (self.dims.len(), self.data.as_slice()) {
            (0, [x]) => Ok(f64::from(*x)),
            _ => Err(Error::Format(format!("tensor `{}` is not a scalar", self.name))),
        }
    }
}

pub fn encode(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?.to_le_bytes());
    for t in tensors {
        let expected: usize = t.dims.iter().product();
        if expected != t.data.len() {
            return Err(Error::InvalidArgument(format!("tensor `{}` has inconsistent dims", t.name)));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a tensor dump".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dump version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(usize::try_from(r.u64("dims")?).map_err(|_| Error::Format("dimension overflows".into()))?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .and_then(|n| n.checked_mul(4).map(|b| (n, b)))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let raw = r.take(n.1, "data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(tensors)
}

pub fn dump_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    decode(&fs::read(path)?)
}

pub fn find<'a>(tensors: &'a [Tensor], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Format(format!("dump has no tensor `{name}`")))
}

pub fn sae_tensors(p: &SaeParams) -> Vec<Tensor> {
    vec![
        Tensor::from_matrix("w_enc", &p.w_enc),
        Tensor::from_vector("b_enc", &p.b_enc),
        Tensor::from_matrix("w_dec", &p.w_dec),
        Tensor::from_vector("b_dec", &p.b_dec),
        Tensor::scalar("k", p.k as f64),
    ]
}

pub fn sae_from_tensors(t: &[Tensor]) -> Result<SaeParams> {
    let k = find(t, "k")?.to_scalar()?;
    if k < 1.0 || k.fract() != 0.0 {
        return Err(Error::Format(format!("invalid sparsity {k}")));
    }
    let p = SaeParams {
        w_enc: find(t, "w_enc")?.to_matrix()?,
        b_enc: find(t, "b_enc")?.to_vector()?,
        w_dec: find(t, "w_dec")?.to_matrix()?,
        b_dec: find(t, "b_dec")?.to_vector()?,
        k: k as usize,
    };
    p.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(p)
}

fn mlp_tensors(prefix: &str, m: &Mlp, out: &mut Vec<Tensor>) {
    out.push(Tensor::from_matrix(&format!("{prefix}.w1"), &m.w1));
    out.push(Tensor::from_vector(&format!("{prefix}.b1"), &m.b1));
    out.push(Tensor::from_matrix(&format!("{prefix}.w2"), &m.w2));
    out.push(Tensor::from_vector(&format!("{prefix}.b2"), &m.b2));
}

fn mlp_from_tensors(prefix: &str, t: &[Tensor]) -> Result<Mlp> {
    let m = Mlp {
        w1: find(t, &format!("{prefix}.w1"))?.to_matrix()?,
        b1: find(t, &format!("{prefix}.b1"))?.to_vector()?,
        w2: find(t, &format!("{prefix}.w2"))?.to_matrix()?,
        b2: find(t, &format!("{prefix}.b2"))?.to_vector()?,
    };
    if m.b1.dim() != m.w1.rows() || m.w2.cols() != m.w1.rows() || m.b2.dim() != m.w2.rows() {
        return Err(Error::Format(format!("`{prefix}` layer shapes disagree")));
    }
    Ok(m)
}

pub fn router_tensors(r: &RouterParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    mlp_tensors("context", &r.context_encoder, &mut out);
    mlp_tensors("feature", &r.feature_encoder, &mut out);
    out
}

pub fn router_from_tensors(t: &[Tensor]) -> Result<RouterParams> {
    let r = RouterParams {
        context_encoder: mlp_from_tensors("context", t)?,
        feature_encoder: mlp_from_tensors("feature", t)?,
    };
    let (c, f) = (&r.context_encoder, &r.feature_encoder);
    if c.w1.cols() != f.w1.cols() || c.w2.rows() != f.w2.rows() {
        return Err(Error::Format("router encoders disagree on input or embedding size".into()));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::sae::random_params;

    #[test]
    fn sae_round_trip_is_exact_after_quantization() {
        let mut rng = Rng::seed(2);
        let p = random_params(8, 20, 3, &mut rng);
        let once = sae_from_tensors(&decode(&encode(&sae_tensors(&p)).unwrap()).unwrap()).unwrap();
        assert!(once.w_dec.max_abs_diff(&p.w_dec) < 1e-6);
        let twice = sae_from_tensors(&decode(&encode(&sae_tensors(&once)).unwrap()).unwrap()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn router_round_trip() {
        let r = RouterParams::new(6, 5, 4, &mut Rng::seed(1));
        let once = router_from_tensors(&decode(&encode(&router_tensors(&r)).unwrap()).unwrap()).unwrap();
        assert!(once.context_encoder.w1.max_abs_diff(&r.context_encoder.w1) < 1e-6);
        let twice = router_from_tensors(&decode(&encode(&router_tensors(&once)).unwrap()).unwrap()).unwrap();
        assert_eq!(once, twice);
        let mut ts = router_tensors(&r);
        ts.retain(|t| t.name != "feature.b2");
        assert!(matches!(router_from_tensors(&ts), Err(Error::Format(_))));
    }

    #[test]
    fn header_layout() {
        let t = Tensor::from_matrix("w", &Matrix::zeros(64, 512));
        let bytes = encode(&[t]).unwrap();
        assert_eq!(&bytes[..4], b"SAES");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'w');
        assert_eq!(u32::from_le_bytes(bytes[15..19].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[19..27].try_into().unwrap()), 64);
        assert_eq!(u64::from_le_bytes(bytes[27..35].try_into().unwrap()), 512);
        assert_eq!(bytes.len(), 35 + 64 * 512 * 4);
    }

    #[test]
    fn malformed_inputs_are_format_errors() {
        let good = encode(&[Tensor::scalar("a", 1.5), Tensor::from_vector("b", &Vector::zeros(3))]).unwrap();
        for cut in [0, 3, 5, 9, 12, good.len() - 1] {
            assert!(matches!(decode(&good[..cut]), Err(Error::Format(_))), "cut at {cut}");
        }
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format(_))));
        assert_eq!(decode(&good).unwrap().len(), 2);
    }

    #[test]
    fn file_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let ts = vec![Tensor::new("x", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()];
        dump_tensors(&path, &ts).unwrap();
        assert_eq!(load_tensors(&path).unwrap(), ts);
        assert!(matches!(load_tensors(&dir.path().join("missing")), Err(Error::Io(_))));
        assert!(Tensor::new("y", vec![3], vec![1.0]).is_err());
    }

    fn tensor() -> impl proptest::strategy::Strategy<Value = Tensor> {
        use proptest::prelude::*;
        ("[a-z.]{1,12}", prop::collection::vec(1usize..4, 0..4)).prop_flat_map(|(name, dims)| {
            let n = dims.iter().product::<usize>();
            prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO, n)
                .prop_map(move |data| Tensor::new(name.clone(), dims.clone(), data).unwrap())
        })
    }

    proptest::proptest! {
        #[test]
        fn any_tensor_list_round_trips(ts in proptest::collection::vec(tensor(), 0..5)) {
            let back = decode(&encode(&ts).unwrap()).unwrap();
            proptest::prop_assert_eq!(back.len(), ts.len());
            for (a, b) in back.iter().zip(&ts) {
                proptest::prop_assert_eq!(&a.name, &b.name);
                proptest::prop_assert_eq!(&a.dims, &b.dims);
                let bits = |t: &Tensor| t.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                proptest::prop_assert_eq!(bits(a), bits(b));
            }
        }
    }
}
