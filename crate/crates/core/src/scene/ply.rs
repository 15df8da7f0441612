//! PLY point-cloud reading (ASCII and binary little-endian) and Gaussian export.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scalar::{lit, logit, Real};
use crate::scene::GaussianSet;

/// Opacity every ingested Gaussian starts with.
pub const INITIAL_OPACITY: f64 = 0.1;
/// Scale given to a Gaussian that has no neighbour to measure against.
pub const ISOLATED_SCALE: f64 = 0.01;
const MIN_SCALE: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarKind {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
enum PropKind {
    Scalar(ScalarKind),
    List { count: ScalarKind, item: ScalarKind },
}

#[derive(Clone, Debug)]
struct Property {
    name: String,
    kind: PropKind,
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
    body_line: usize,
}

fn parse_err(line: usize, content: &str, msg: impl Into<String>) -> Error {
    Error::PlyParse {
        line,
        content: content.to_string(),
        msg: msg.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let Some(rel_end) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(parse_err(line_no + 1, "", "header is missing end_header"));
        };
        line_no += 1;
        let raw = &bytes[offset..offset + rel_end];
        offset += rel_end + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| parse_err(line_no, "<non-utf8>", "header line is not utf-8"))?
            .trim_end_matches('\r')
            .trim();
        let mut tok = line.split_whitespace();
        let first = tok.next().unwrap_or("");
        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(line_no, line, "file does not start with 'ply'"));
            }
            continue;
        }
        match first {
            "format" => {
                let kind = tok.next().unwrap_or("");
                let version = tok.next().unwrap_or("");
                if version != "1.0" {
                    return Err(parse_err(line_no, line, "unsupported format version"));
                }
                format = Some(match kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    _ => {
                        return Err(parse_err(
                            line_no,
                            line,
                            "only ascii and binary_little_endian are supported",
                        ))
                    }
                });
            }
            "comment" | "obj_info" | "" => {}
            "element" => {
                let name = tok
                    .next()
                    .ok_or_else(|| parse_err(line_no, line, "element without a name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(line_no, line, "element count is not an integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(line_no, line, "property before any element"))?;
                let ty = tok.next().unwrap_or("");
                let kind = if ty == "list" {
                    let count = tok.next().and_then(ScalarKind::parse);
                    let item = tok.next().and_then(ScalarKind::parse);
                    match (count, item) {
                        (Some(count), Some(item)) => PropKind::List { count, item },
                        _ => return Err(parse_err(line_no, line, "bad list property types")),
                    }
                } else {
                    PropKind::Scalar(
                        ScalarKind::parse(ty)
                            .ok_or_else(|| parse_err(line_no, line, format!("unknown property type {ty:?}")))?,
                    )
                };
                let name = tok
                    .next()
                    .ok_or_else(|| parse_err(line_no, line, "property without a name"))?;
                el.props.push(Property {
                    name: name.to_string(),
                    kind,
                });
            }
            "end_header" => break,
            _ => return Err(parse_err(line_no, line, "unrecognised header keyword")),
        }
    }
    let format = format.ok_or_else(|| parse_err(line_no, "end_header", "missing format line"))?;
    Ok(Header {
        format,
        elements,
        body_offset: offset,
        body_line: line_no + 1,
    })
}

/// Positions plus optional per-point colours in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyPoints<T> {
    pub positions: Vec<Vec3<T>>,
    pub colours: Option<Vec<[T; 3]>>,
}

pub fn read_ply_points<T: Real>(path: impl AsRef<Path>) -> Result<PlyPoints<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply_points(&bytes)
}

/// Parses the `vertex` element of a PLY file. Other elements are skipped.
pub fn parse_ply_points<T: Real>(bytes: &[u8]) -> Result<PlyPoints<T>> {
    let header = parse_header(bytes)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(header.body_line - 1, "end_header", "no vertex element"))?;
    let vertex = &header.elements[vertex_pos];
    let find = |names: &[&str]| {
        vertex
            .props
            .iter()
            .position(|p| names.contains(&p.name.as_str()) && matches!(p.kind, PropKind::Scalar(_)))
    };
    let xyz = [find(&["x"]), find(&["y"]), find(&["z"])];
    let [Some(ix), Some(iy), Some(iz)] = xyz else {
        return Err(parse_err(
            header.body_line - 1,
            "end_header",
            "vertex element needs scalar x, y and z properties",
        ));
    };
    let rgb8 = [find(&["red", "r"]), find(&["green", "g"]), find(&["blue", "b"])];
    let dc = [find(&["f_dc_0"]), find(&["f_dc_1"]), find(&["f_dc_2"])];
    let colour_props = match (rgb8, dc) {
        ([Some(r), Some(g), Some(b)], _) => Some([r, g, b]),
        (_, [Some(r), Some(g), Some(b)]) => Some([r, g, b]),
        _ => None,
    };

    let body = &bytes[header.body_offset..];
    let mut records: Vec<Vec<f64>> = Vec::with_capacity(vertex.count);
    match header.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body)
                .map_err(|_| parse_err(header.body_line, "<non-utf8>", "ascii body is not utf-8"))?;
            let mut lines = text
                .lines()
                .enumerate()
                .map(|(i, l)| (header.body_line + i, l.trim()))
                .filter(|(_, l)| !l.is_empty());
            for (ei, el) in header.elements.iter().enumerate().take(vertex_pos + 1) {
                for _ in 0..el.count {
                    let (line_no, line) = lines.next().ok_or_else(|| {
                        parse_err(
                            header.body_line,
                            "<eof>",
                            format!("file ends before all {} {} records", el.count, el.name),
                        )
                    })?;
                    if ei != vertex_pos {
                        continue;
                    }
                    let mut tok = line.split_whitespace();
                    let mut rec = Vec::with_capacity(el.props.len());
                    for p in &el.props {
                        let mut next = || -> Result<f64> {
                            tok.next()
                                .and_then(|t| t.parse::<f64>().ok())
                                .ok_or_else(|| parse_err(line_no, line, format!("bad value for {}", p.name)))
                        };
                        match p.kind {
                            PropKind::Scalar(_) => rec.push(next()?),
                            PropKind::List { .. } => {
                                let n = next()? as usize;
                                for _ in 0..n {
                                    next()?;
                                }
                                rec.push(f64::NAN);
                            }
                        }
                    }
                    records.push(rec);
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut at = 0usize;
            let take = |at: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
                if *at + n > body.len() {
                    return Err(parse_err(
                        header.body_line,
                        "<binary body>",
                        format!("truncated binary data while reading {what}"),
                    ));
                }
                let s = &body[*at..*at + n];
                *at += n;
                Ok(s)
            };
            for (ei, el) in header.elements.iter().enumerate().take(vertex_pos + 1) {
                for _ in 0..el.count {
                    let mut rec = Vec::with_capacity(el.props.len());
                    for p in &el.props {
                        match p.kind {
                            PropKind::Scalar(k) => rec.push(k.read_le(take(&mut at, k.size(), &p.name)?)),
                            PropKind::List { count, item } => {
                                let n = count.read_le(take(&mut at, count.size(), &p.name)?);
                                take(&mut at, n as usize * item.size(), &p.name)?;
                                rec.push(f64::NAN);
                            }
                        }
                    }
                    if ei == vertex_pos {
                        records.push(rec);
                    }
                }
            }
        }
    }

    let positions = records
        .iter()
        .map(|r| [lit(r[ix]), lit(r[iy]), lit(r[iz])])
        .collect::<Vec<Vec3<T>>>();
    let colours = colour_props.map(|[r, g, b]| {
        let scale = |idx: usize| match vertex.props[idx].kind {
            PropKind::Scalar(ScalarKind::U8) => 1.0 / 255.0,
            PropKind::Scalar(ScalarKind::U16) => 1.0 / 65535.0,
            _ => 1.0,
        };
        let (sr, sg, sb) = (scale(r), scale(g), scale(b));
        records
            .iter()
            .map(|rec| {
                [
                    lit((rec[r] * sr).clamp(0.0, 1.0)),
                    lit((rec[g] * sg).clamp(0.0, 1.0)),
                    lit((rec[b] * sb).clamp(0.0, 1.0)),
                ]
            })
            .collect()
    });
    Ok(PlyPoints { positions, colours })
}

/// Reads a point cloud and turns every point into an initial Gaussian (SH degree 0).
pub fn ingest_point_cloud<T: Real>(path: impl AsRef<Path>, colour_default: [T; 3]) -> Result<GaussianSet<T>> {
    let points = read_ply_points::<T>(path.as_ref())?;
    if points.positions.is_empty() {
        return Err(Error::EmptyScene(format!(
            "{} contains no points",
            path.as_ref().display()
        )));
    }
    gaussians_from_points(&points, colour_default, 0)
}

/// One Gaussian per point: identity rotation, isotropic scale from the mean
/// distance to the three nearest neighbours, opacity [`INITIAL_OPACITY`].
pub fn gaussians_from_points<T: Real>(
    points: &PlyPoints<T>,
    colour_default: [T; 3],
    sh_degree: usize,
) -> Result<GaussianSet<T>> {
    if points.positions.is_empty() {
        return Err(Error::EmptyScene("point cloud is empty".into()));
    }
    let mut set = GaussianSet::new(sh_degree)?;
    let dists = mean_knn_distance(&points.positions, 3);
    let opacity_logit = logit(lit::<T>(INITIAL_OPACITY));
    for (i, p) in points.positions.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("point {i} is not finite")));
        }
        let d = dists[i].unwrap_or(lit(ISOLATED_SCALE)).max(lit(MIN_SCALE));
        let ls = d.ln();
        let colour = points.colours.as_ref().map(|c| c[i]).unwrap_or(colour_default);
        set.push(
            *p,
            [T::one(), T::zero(), T::zero(), T::zero()],
            [ls; 3],
            opacity_logit,
            &colour,
        );
    }
    Ok(set)
}

/// Mean distance from each point to its `k` nearest other points
/// (fewer when the cloud is smaller). `None` for a lone point.
pub fn mean_knn_distance<T: Real>(points: &[Vec3<T>], k: usize) -> Vec<Option<T>> {
    let n = points.len();
    let k = k.min(n.saturating_sub(1));
    if k == 0 {
        return vec![None; n];
    }
    if n <= 2048 {
        return (0..n)
            .map(|i| {
                let mut best: Vec<T> = Vec::with_capacity(k + 1);
                for (j, q) in points.iter().enumerate() {
                    if j != i {
                        insert_k(&mut best, dist(points[i], *q), k);
                    }
                }
                Some(mean(&best))
            })
            .collect();
    }
    grid_knn(points, k)
}

fn dist<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    crate::math::norm3(crate::math::sub3(a, b))
}

fn mean<T: Real>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap()
}

fn insert_k<T: Real>(best: &mut Vec<T>, d: T, k: usize) {
    if best.len() == k && d >= best[k - 1] {
        return;
    }
    let pos = best.partition_point(|&b| b <= d);
    best.insert(pos, d);
    best.truncate(k);
}

/// Uniform-grid k-NN for larger clouds; results match the brute-force path.
fn grid_knn<T: Real>(points: &[Vec3<T>], k: usize) -> Vec<Option<T>> {
    let n = points.len();
    let p64: Vec<[f64; 3]> = points
        .iter()
        .map(|p| [p[0].to_f64_lossy(), p[1].to_f64_lossy(), p[2].to_f64_lossy()])
        .collect();
    let mut lo = p64[0];
    let mut hi = p64[0];
    for p in &p64 {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let volume: f64 = (0..3).map(|d| (hi[d] - lo[d]).max(1e-9)).product();
    let cell = (volume * 2.0 / n as f64).cbrt().max(1e-9);
    let dims: [i64; 3] = std::array::from_fn(|d| ((hi[d] - lo[d]) / cell).floor() as i64 + 1);
    let cell_of = |p: &[f64; 3]| -> [i64; 3] {
        std::array::from_fn(|d| (((p[d] - lo[d]) / cell).floor() as i64).clamp(0, dims[d] - 1))
    };
    let flat = |c: [i64; 3]| ((c[2] * dims[1] + c[1]) * dims[0] + c[0]) as usize;
    let ncell = (dims[0] * dims[1] * dims[2]) as usize;
    let mut starts = vec![0usize; ncell + 1];
    let cells: Vec<usize> = p64.iter().map(|p| flat(cell_of(p))).collect();
    for &c in &cells {
        starts[c + 1] += 1;
    }
    for i in 0..ncell {
        starts[i + 1] += starts[i];
    }
    let mut fill = starts.clone();
    let mut order = vec![0usize; n];
    for (i, &c) in cells.iter().enumerate() {
        order[fill[c]] = i;
        fill[c] += 1;
    }
    (0..n)
        .map(|i| {
            let c = cell_of(&p64[i]);
            let mut best: Vec<T> = Vec::with_capacity(k + 1);
            let mut ring = 0i64;
            loop {
                for dz in -ring..=ring {
                    for dy in -ring..=ring {
                        for dx in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            let cc = [c[0] + dx, c[1] + dy, c[2] + dz];
                            if (0..3).any(|d| cc[d] < 0 || cc[d] >= dims[d]) {
                                continue;
                            }
                            let f = flat(cc);
                            for &j in &order[starts[f]..starts[f + 1]] {
                                if j != i {
                                    insert_k(&mut best, dist(points[i], points[j]), k);
                                }
                            }
                        }
                    }
                }
                // every unvisited point is at least `ring * cell` away
                let covered = ring as f64 * cell;
                let done = best.len() == k && best[k - 1].to_f64_lossy() <= covered;
                let exhausted = (0..3).all(|d| c[d] - ring <= 0 && c[d] + ring >= dims[d] - 1);
                if done || exhausted {
                    break;
                }
                ring += 1;
            }
            Some(mean(&best))
        })
        .collect()
}

/// Writes Gaussians with the usual splatting property names. Values are
/// stored as doubles so positions survive a round trip exactly.
pub fn write_ply<T: Real>(gaussians: &GaussianSet<T>, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    let stride = gaussians.colour_stride();
    let mut names: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
    names.extend((0..3).map(|c| format!("f_dc_{c}")));
    names.extend((0..stride - 3).map(|c| format!("f_rest_{c}")));
    names.push("opacity".into());
    names.extend((0..3).map(|c| format!("scale_{c}")));
    names.extend((0..4).map(|c| format!("rot_{c}")));

    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(out, "ply\nformat {fmt} 1.0\nelement vertex {}", gaussians.len()).unwrap();
    for n in &names {
        writeln!(out, "property double {n}").unwrap();
    }
    writeln!(out, "end_header").unwrap();
    for i in 0..gaussians.len() {
        let mut row: Vec<f64> = Vec::with_capacity(names.len());
        row.extend(gaussians.positions[i].iter().map(|v| v.to_f64_lossy()));
        row.extend(gaussians.colour(i).iter().map(|v| v.to_f64_lossy()));
        row.push(gaussians.opacity_logits[i].to_f64_lossy());
        row.extend(gaussians.log_scales[i].iter().map(|v| v.to_f64_lossy()));
        row.extend(gaussians.rotations[i].iter().map(|v| v.to_f64_lossy()));
        match format {
            PlyFormat::Ascii => {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
            PlyFormat::BinaryLittleEndian => {
                for v in row {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
