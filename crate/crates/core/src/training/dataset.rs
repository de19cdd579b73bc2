use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::plants::Dynamics;
use crate::system::Dims;

const MAGIC: &[u8; 8] = b"DISSOBSD";
const VERSION: u32 = 1;

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub plant: String,
    pub seed: u64,
}

/// Labelled samples `(x, u, w, ẋ)` with `ẋ` the analytic plant field.
#[derive(Clone, Debug, PartialEq)]
pub struct DynDataset {
    pub dims: Dims,
    pub x: Tensor,
    pub u: Tensor,
    pub w: Tensor,
    pub xdot: Tensor,
    pub provenance: Provenance,
}

/// Unlabelled nominal samples χ = (x, u, y, w).
#[derive(Clone, Debug, PartialEq)]
pub struct ChiDataset {
    pub dims: Dims,
    pub x: Tensor,
    pub u: Tensor,
    pub y: Tensor,
    pub w: Tensor,
    pub provenance: Provenance,
}

impl DynDataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn blocks(&self) -> [&Tensor; 4] {
        [&self.x, &self.u, &self.w, &self.xdot]
    }

    fn widths(d: Dims) -> [usize; 4] {
        [d.nx, d.nu, d.nw, d.nx]
    }

    /// Per-axis standard deviation of `ẋ`.
    pub fn xdot_std(&self) -> Vec<f64> {
        column_std(&self.xdot)
    }
}

impl ChiDataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn blocks(&self) -> [&Tensor; 4] {
        [&self.x, &self.u, &self.y, &self.w]
    }

    fn widths(d: Dims) -> [usize; 4] {
        [d.nx, d.nu, d.ny, d.nw]
    }
}

pub(crate) fn column_std(t: &Tensor) -> Vec<f64> {
    let (m, n) = t.shape();
    (0..n)
        .map(|j| {
            let mean = (0..m).map(|i| t.get(i, j)).sum::<f64>() / m as f64;
            ((0..m).map(|i| (t.get(i, j) - mean).powi(2)).sum::<f64>() / m as f64).sqrt()
        })
        .collect()
}

fn draw_block<R: rand::Rng>(b: &crate::system::BoxDomain, n: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(n * b.dim());
    for _ in 0..n {
        b.sample_into(rng, &mut data);
    }
    Tensor::new(n, b.dim(), data).expect("sampled block has the box width")
}

/// Uniform i.i.d. draws from the plant's boxes; `ẋ` comes from the analytic field.
///
/// The labelled and unlabelled sets use separate streams of the same seed.
pub fn gen_datasets(plant: &dyn Dynamics, n: usize, n_chi: usize, seed: u64) -> Result<(DynDataset, ChiDataset)> {
    if n == 0 || n_chi == 0 {
        return Err(Error::Config("dataset sizes must be at least 1".into()));
    }
    let dims = plant.dims();
    let dom = plant.domain();
    let provenance = Provenance { plant: plant.name(), seed };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = draw_block(&dom.x, n, &mut rng);
    let u = draw_block(&dom.u, n, &mut rng);
    let w = draw_block(&dom.w, n, &mut rng);
    let mut xdot = Tensor::zeros(n, dims.nx);
    for i in 0..n {
        let mut out = vec![0.0; dims.nx];
        plant.field(x.row(i), u.row(i), w.row(i), &mut out)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("plant field at sample {i}")));
        }
        xdot.data_mut()[i * dims.nx..(i + 1) * dims.nx].copy_from_slice(&out);
    }
    let dyn_set = DynDataset { dims, x, u, w, xdot, provenance: provenance.clone() };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let chi = ChiDataset {
        dims,
        x: draw_block(&dom.x, n_chi, &mut rng),
        u: draw_block(&dom.u, n_chi, &mut rng),
        y: draw_block(&dom.y, n_chi, &mut rng),
        w: draw_block(&dom.w, n_chi, &mut rng),
        provenance,
    };
    Ok((dyn_set, chi))
}

fn write_container<W: Write>(mut w: W, kind: u8, dims: Dims, prov: &Provenance, blocks: &[&Tensor]) -> Result<()> {
    let n = blocks[0].rows();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    for d in [dims.nx, dims.nu, dims.ny, dims.nw] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&prov.seed.to_le_bytes())?;
    w.write_all(&(prov.plant.len() as u32).to_le_bytes())?;
    w.write_all(prov.plant.as_bytes())?;
    let mut buf = Vec::new();
    for i in 0..n {
        buf.clear();
        for b in blocks {
            for v in b.row(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_container<R: Read>(mut r: R, kind: u8, widths: impl Fn(Dims) -> [usize; 4]) -> Result<(Dims, Provenance, [Tensor; 4])> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("dataset version {version}, expected {VERSION}")));
    }
    let mut k = [0u8; 1];
    r.read_exact(&mut k)?;
    if k[0] != kind {
        return Err(Error::Format(format!("dataset kind {} where {kind} expected", k[0])));
    }
    let mut d = [0usize; 4];
    for v in d.iter_mut() {
        *v = read_u32(&mut r)? as usize;
    }
    let dims = Dims::new(d[0], d[1], d[2], d[3]);
    let n = read_u64(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let name_len = read_u32(&mut r)? as usize;
    if name_len > 4096 {
        return Err(Error::Format("implausible plant name length".into()));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let plant = String::from_utf8(name).map_err(|_| Error::Format("plant name is not UTF-8".into()))?;

    let w = widths(dims);
    let row: usize = w.iter().sum();
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != n * row * 8 {
        return Err(Error::Format(format!("payload of {} bytes for {n} records of width {row}", raw.len())));
    }
    let mut blocks: [Vec<f64>; 4] = Default::default();
    for (i, b) in blocks.iter_mut().enumerate() {
        b.reserve(n * w[i]);
    }
    let mut values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for _ in 0..n {
        for (b, &wi) in blocks.iter_mut().zip(&w) {
            b.extend(values.by_ref().take(wi));
        }
    }
    let [a, b, c, e] = blocks;
    let t = [Tensor::new(n, w[0], a)?, Tensor::new(n, w[1], b)?, Tensor::new(n, w[2], c)?, Tensor::new(n, w[3], e)?];
    Ok((dims, Provenance { plant, seed }, t))
}

fn write_csv_blocks<W: Write>(mut w: W, names: [&str; 4], blocks: [&Tensor; 4]) -> Result<()> {
    let mut header = Vec::new();
    for (name, b) in names.iter().zip(&blocks) {
        header.extend((1..=b.cols()).map(|i| format!("{name}{i}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..blocks[0].rows() {
        let row: Vec<String> = blocks.iter().flat_map(|b| b.row(i).iter().map(|v| format!("{v:.16e}"))).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

impl DynDataset {
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        write_container(w, 0, self.dims, &self.provenance, &self.blocks())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let (dims, provenance, [x, u, w, xdot]) = read_container(r, 0, Self::widths)?;
        Ok(Self { dims, x, u, w, xdot, provenance })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_csv_blocks(w, ["x", "u", "w", "xdot"], self.blocks())
    }
}

impl ChiDataset {
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        write_container(w, 1, self.dims, &self.provenance, &self.blocks())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let (dims, provenance, [x, u, y, w]) = read_container(r, 1, Self::widths)?;
        Ok(Self { dims, x, u, y, w, provenance })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_csv_blocks(w, ["x", "u", "y", "w"], self.blocks())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::{PlantSpec, Side};

    #[test]
    fn samples_lie_in_the_boxes_and_are_reproducible() {
        let plant = PlantSpec::bicycle();
        let (d, c) = gen_datasets(&plant, 500, 800, 3).unwrap();
        let dom = &plant.domain;
        assert!((0..d.len()).all(|i| dom.x.contains(d.x.row(i)) && dom.u.contains(d.u.row(i))));
        assert!((0..c.len()).all(|i| dom.x.contains(c.x.row(i)) && dom.y.contains(c.y.row(i))));
        let (d2, c2) = gen_datasets(&plant, 500, 800, 3).unwrap();
        assert_eq!((d, c), (d2, c2));
        assert!(gen_datasets(&plant, 0, 1, 0).is_err());
    }

    #[test]
    fn labels_are_the_plant_field() {
        let plant = PlantSpec::lorenz();
        let (d, _) = gen_datasets(&plant, 20, 1, 1).unwrap();
        for i in 0..20 {
            let mut f = [0.0; 3];
            plant.field(d.x.row(i), &[], &[], &mut f).unwrap();
            assert_eq!(d.xdot.row(i), f);
        }
    }

    #[test]
    fn binary_round_trip() {
        let side = PlantSpec::fhn_pair().local(Side::B).unwrap();
        let (d, c) = gen_datasets(&side, 37, 41, 9).unwrap();
        assert_eq!(d.w.cols(), 1);
        let mut buf = Vec::new();
        d.write(&mut buf).unwrap();
        assert_eq!(DynDataset::read(&buf[..]).unwrap(), d);
        assert!(ChiDataset::read(&buf[..]).is_err());
        buf.clear();
        c.write(&mut buf).unwrap();
        assert_eq!(ChiDataset::read(&buf[..]).unwrap(), c);
        buf.pop();
        assert!(ChiDataset::read(&buf[..]).is_err());
    }

    #[test]
    fn csv_export_has_one_line_per_record() {
        let (d, _) = gen_datasets(&PlantSpec::bicycle(), 5, 1, 0).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(text.lines().next().unwrap(), "x1,x2,u1,xdot1,xdot2");
    }
}
