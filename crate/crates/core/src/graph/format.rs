//! `.cbr` container: little-endian throughout.
//!
//! ```text
//! "CBRG" | version u16 | graph section | weight section | crc32 u32
//! ```
//!
//! Strings are `u16` length + UTF-8. The graph section holds the input
//! ports, output names and one length-prefixed record per node. The weight
//! section is `u32` count followed by `name, dtype u8 (0 = f32), rank u8,
//! dims u32[rank], byte length u64, payload`. The CRC-32 (IEEE) covers every
//! preceding byte. Standalone weight files use magic `"CBRW"` and omit the
//! graph section.

use std::path::Path;

use super::{Graph, Model, Node, Op, Port, WeightStore};
use crate::error::{Error, Result};
use crate::nn::{Activation, ConvSpec, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"CBRG";
pub const WEIGHT_MAGIC: &[u8; 4] = b"CBRW";
pub const FORMAT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;

mod opcode {
    pub const CONV: u8 = 1;
    pub const CONV_TRANSPOSE: u8 = 2;
    pub const RELU: u8 = 3;
    pub const ADD: u8 = 4;
    pub const CONCAT: u8 = 5;
    pub const CONSTANT: u8 = 6;
    pub const IDENTITY: u8 = 7;
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len32(&mut self, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::invalid("count exceeds u32"))?;
        self.u32(v);
        Ok(())
    }
    fn str(&mut self, s: &str) -> Result<()> {
        let n = u16::try_from(s.len()).map_err(|_| Error::invalid(format!("name too long: {s}")))?;
        self.u16(n);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn dims(&mut self, d: &[usize]) -> Result<()> {
        let rank = u8::try_from(d.len()).map_err(|_| Error::invalid("rank exceeds 255"))?;
        self.u8(rank);
        for &x in d {
            self.len32(x)?;
        }
        Ok(())
    }
    fn spec(&mut self, s: &ConvSpec) -> Result<()> {
        for v in s.kernel.iter().chain(&s.stride).chain(&s.padding) {
            self.len32(*v)?;
        }
        self.len32(s.in_channels)?;
        self.len32(s.out_channels)?;
        self.u8(s.bias as u8);
        Ok(())
    }
    fn opt_str(&mut self, s: Option<&str>) -> Result<()> {
        match s {
            Some(s) => {
                self.u8(1);
                self.str(s)
            }
            None => {
                self.u8(0);
                Ok(())
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("name is not UTF-8".into()))
    }
    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| self.usize()).collect()
    }
    fn spec(&mut self) -> Result<ConvSpec> {
        let mut v = [0usize; 9];
        for x in &mut v {
            *x = self.usize()?;
        }
        Ok(ConvSpec {
            kernel: [v[0], v[1], v[2]],
            stride: [v[3], v[4], v[5]],
            padding: [v[6], v[7], v[8]],
            in_channels: self.usize()?,
            out_channels: self.usize()?,
            bias: self.u8()? != 0,
        })
    }
    fn opt_str(&mut self) -> Result<Option<String>> {
        match self.u8()? {
            0 => Ok(None),
            1 => self.str().map(Some),
            t => Err(Error::Corrupt(format!("bad option tag {t}"))),
        }
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_node(w: &mut Writer, n: &Node) -> Result<()> {
    let mut r = Writer::default();
    r.str(&n.name)?;
    let code = match &n.op {
        Op::Conv { .. } => opcode::CONV,
        Op::ConvTranspose { .. } => opcode::CONV_TRANSPOSE,
        Op::Relu => opcode::RELU,
        Op::Add => opcode::ADD,
        Op::Concat => opcode::CONCAT,
        Op::Constant { .. } => opcode::CONSTANT,
        Op::Identity => opcode::IDENTITY,
    };
    r.u8(code);
    r.u16(n.inputs.len() as u16);
    for i in &n.inputs {
        r.str(i)?;
    }
    r.str(&n.output)?;
    match &n.op {
        Op::Conv {
            spec,
            weight,
            bias,
            activation,
        } => {
            r.spec(spec)?;
            r.str(weight)?;
            r.opt_str(bias.as_deref())?;
            r.u8(match activation {
                Activation::None => 0,
                Activation::Relu => 1,
            });
        }
        Op::ConvTranspose { spec, weight, bias } => {
            r.spec(spec)?;
            r.str(weight)?;
            r.opt_str(bias.as_deref())?;
        }
        Op::Constant { weight, dims } => {
            r.str(weight)?;
            r.dims(dims)?;
        }
        _ => {}
    }
    w.len32(r.buf.len())?;
    w.buf.extend_from_slice(&r.buf);
    Ok(())
}

fn read_node(r: &mut Reader) -> Result<Node> {
    let len = r.usize()?;
    let mut rec = Reader {
        buf: r.take(len)?,
        pos: 0,
    };
    let name = rec.str()?;
    let code = rec.u8()?;
    let n_in = rec.u16()? as usize;
    let inputs = (0..n_in).map(|_| rec.str()).collect::<Result<Vec<_>>>()?;
    let output = rec.str()?;
    let op = match code {
        opcode::CONV => {
            let spec = rec.spec()?;
            let weight = rec.str()?;
            let bias = rec.opt_str()?;
            let activation = match rec.u8()? {
                0 => Activation::None,
                1 => Activation::Relu,
                a => return Err(Error::Corrupt(format!("unknown activation {a}"))),
            };
            Op::Conv {
                spec,
                weight,
                bias,
                activation,
            }
        }
        opcode::CONV_TRANSPOSE => Op::ConvTranspose {
            spec: rec.spec()?,
            weight: rec.str()?,
            bias: rec.opt_str()?,
        },
        opcode::RELU => Op::Relu,
        opcode::ADD => Op::Add,
        opcode::CONCAT => Op::Concat,
        opcode::CONSTANT => Op::Constant {
            weight: rec.str()?,
            dims: rec.dims()?,
        },
        opcode::IDENTITY => Op::Identity,
        c => return Err(Error::Corrupt(format!("unknown opcode {c}"))),
    };
    if !rec.done() {
        return Err(Error::Corrupt(format!("trailing bytes in record of node `{name}`")));
    }
    Ok(Node {
        name,
        op,
        inputs,
        output,
    })
}

fn write_weights(w: &mut Writer, ws: &WeightStore) -> Result<()> {
    w.len32(ws.len())?;
    for (name, t) in ws.iter() {
        w.str(name)?;
        w.u8(DTYPE_F32);
        w.dims(t.dims())?;
        w.u64((t.len() * 4) as u64);
        w.buf.reserve(t.len() * 4);
        for v in t.data() {
            w.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn read_weights(r: &mut Reader) -> Result<WeightStore> {
    let n = r.usize()?;
    let mut ws = WeightStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Corrupt(format!("weight `{name}` has unknown dtype {dtype}")));
        }
        let dims = r.dims()?;
        let bytes = r.u64()? as usize;
        let count: usize = dims.iter().product();
        if bytes != count * 4 {
            return Err(Error::Corrupt(format!(
                "weight `{name}`: payload of {bytes} bytes for {count} elements"
            )));
        }
        let data = r
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Corrupt(e.to_string()))?;
        ws.insert(name, t).map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    Ok(ws)
}

fn seal(mut w: Writer) -> Vec<u8> {
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

/// Checks magic, CRC and version; returns a reader positioned after them.
fn open<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Reader<'a>> {
    if bytes.len() < 10 {
        return Err(Error::Corrupt("file too short".into()));
    }
    if &bytes[..4] != magic {
        return Err(Error::Corrupt(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(r)
}

pub fn serialize_bytes(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let g = &model.graph;
    let mut w = Writer::default();
    w.buf.extend_from_slice(MODEL_MAGIC);
    w.u16(FORMAT_VERSION);
    w.len32(g.inputs.len())?;
    for p in &g.inputs {
        w.str(&p.name)?;
        w.dims(&p.dims)?;
    }
    w.len32(g.outputs.len())?;
    for o in &g.outputs {
        w.str(o)?;
    }
    w.len32(g.nodes.len())?;
    for n in &g.nodes {
        write_node(&mut w, n)?;
    }
    write_weights(&mut w, &model.weights)?;
    Ok(seal(w))
}

pub fn deserialize_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = open(bytes, MODEL_MAGIC)?;
    let n_in = r.usize()?;
    let inputs = (0..n_in)
        .map(|_| {
            Ok(Port {
                name: r.str()?,
                dims: r.dims()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n_out = r.usize()?;
    let outputs = (0..n_out).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let n_nodes = r.usize()?;
    let nodes = (0..n_nodes).map(|_| read_node(&mut r)).collect::<Result<Vec<_>>>()?;
    let weights = read_weights(&mut r)?;
    if !r.done() {
        return Err(Error::Corrupt("trailing bytes after weight section".into()));
    }
    Model::new(
        Graph {
            inputs,
            outputs,
            nodes,
        },
        weights,
    )
}

pub fn serialize(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = serialize_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn deserialize(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_bytes(&bytes)
}

pub fn write_weight_file(ws: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = Writer::default();
    w.buf.extend_from_slice(WEIGHT_MAGIC);
    w.u16(FORMAT_VERSION);
    write_weights(&mut w, ws)?;
    std::fs::write(path, seal(w)).map_err(|e| Error::io(path, e))
}

pub fn read_weight_file(path: impl AsRef<Path>) -> Result<WeightStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = open(&bytes, WEIGHT_MAGIC)?;
    let ws = read_weights(&mut r)?;
    if !r.done() {
        return Err(Error::Corrupt("trailing bytes after weight section".into()));
    }
    Ok(ws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    fn small_model() -> Model {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[1, 2, 2, 2]);
        let spec = ConvSpec::new(1, 2, [3, 1, 1]);
        let c = b.conv(&x, spec, "conv");
        let k = b.constant("k", &[2, 1, 1, 1]);
        let a = b.add(&c, &k);
        let r = b.relu(&a);
        b.output(&r);
        let g = b.finish();
        let mut ws = WeightStore::new();
        ws.insert("conv_1.weight", Tensor::new(spec.weight_dims(), vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.125]).unwrap()).unwrap();
        ws.insert("conv_1.bias", Tensor::new(vec![2], vec![0.1, 0.2]).unwrap()).unwrap();
        ws.insert("k", Tensor::new(vec![2, 1, 1, 1], vec![1.0, -1.0]).unwrap()).unwrap();
        Model::new(g, ws).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = small_model();
        let bytes = serialize_bytes(&m).unwrap();
        assert_eq!(&bytes[..4], MODEL_MAGIC);
        let back = deserialize_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(serialize_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn detects_corruption() {
        let mut bytes = serialize_bytes(&small_model()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(deserialize_bytes(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn detects_version_mismatch() {
        let mut bytes = serialize_bytes(&small_model()).unwrap();
        bytes[4] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(deserialize_bytes(&bytes), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn detects_dangling_weight() {
        let mut m = small_model();
        m.weights.remove("k");
        assert!(matches!(serialize_bytes(&m), Err(Error::DanglingWeight(_))));
        // bypass the writer's validation to hit the reader's
        let mut w = Writer::default();
        w.buf.extend_from_slice(MODEL_MAGIC);
        w.u16(FORMAT_VERSION);
        w.len32(1).unwrap();
        w.str("x").unwrap();
        w.dims(&[1, 2, 2, 2]).unwrap();
        w.len32(1).unwrap();
        w.str(&m.graph.outputs[0]).unwrap();
        w.len32(m.graph.nodes.len()).unwrap();
        for n in &m.graph.nodes {
            write_node(&mut w, n).unwrap();
        }
        write_weights(&mut w, &m.weights).unwrap();
        let bytes = seal(w);
        assert!(matches!(deserialize_bytes(&bytes), Err(Error::DanglingWeight(_))));
    }

    #[test]
    fn weight_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.cbr");
        let ws = small_model().weights;
        write_weight_file(&ws, &p).unwrap();
        assert_eq!(read_weight_file(&p).unwrap(), ws);
        assert!(matches!(deserialize(&p), Err(Error::Corrupt(_))));
    }
}
