//! Linear-region analysis: distinct code counts on data and sampled
//! activation-pattern maps over 2-D input boxes, with SVG rendering.
//!
//! Grid counts are lower bounds on the true number of regions meeting the
//! box: a region is seen only if it contains a sample point.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::codes::{sign_code, CodeError};
use crate::model::{Dense, EncoderModel, ModelError};
use crate::tensor::Tensor;

pub const MIN_RESOLUTION: usize = 16;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("region maps need 2-D inputs, model takes {0}")]
    InputDim(usize),
    #[error("resolution must be at least {MIN_RESOLUTION}, got {0}")]
    Resolution(usize),
    #[error("dataset is empty")]
    EmptyData,
    #[error("bounding box must have positive finite extent")]
    BadBox,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, RegionError>;

/// Anything whose ReLU activation pattern can be read off for a batch.
pub trait ActivationPattern {
    fn input_dim(&self) -> usize;
    /// One pattern per input row; `true` where a preactivation is `>= 0`.
    fn patterns(&self, x: &Tensor) -> Result<Vec<Vec<bool>>>;
}

fn append_signs(out: &mut [Vec<bool>], pre: &Tensor) {
    for (i, row) in out.iter_mut().enumerate() {
        row.extend(pre.row(i).iter().map(|&v| v >= 0.0));
    }
}

/// Signs of every encoder layer, the projection hidden layer and the
/// projection output, concatenated in that order.
impl ActivationPattern for EncoderModel {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn patterns(&self, x: &Tensor) -> Result<Vec<Vec<bool>>> {
        let act = self.forward(x)?;
        let mut out = vec![Vec::new(); x.rows()];
        for pre in &act.encoder_pre {
            append_signs(&mut out, pre);
        }
        append_signs(&mut out, &act.projection_pre);
        append_signs(&mut out, &act.a);
        Ok(out)
    }
}

/// A single ReLU layer; its regions form a hyperplane arrangement.
impl ActivationPattern for Dense {
    fn input_dim(&self) -> usize {
        Dense::input_dim(self)
    }

    fn patterns(&self, x: &Tensor) -> Result<Vec<Vec<bool>>> {
        let pre = self.apply(x)?;
        let mut out = vec![Vec::new(); x.rows()];
        append_signs(&mut out, &pre);
        Ok(out)
    }
}

/// Which preactivation [`count_distinct_codes`] reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CodeLayer {
    /// Last encoder layer, the one producing `h`.
    Last,
    /// Projection output `a`.
    #[default]
    Projection,
}

pub fn count_distinct_codes(model: &EncoderModel, data: &Tensor, layer: CodeLayer) -> Result<usize> {
    if data.rows() == 0 {
        return Err(RegionError::EmptyData);
    }
    let act = model.forward(data)?;
    let pre = match layer {
        CodeLayer::Last => act.encoder_pre.last().expect("encoder has layers"),
        CodeLayer::Projection => &act.a,
    };
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..pre.rows() {
        seen.insert(sign_code(pre.row(i))?);
    }
    Ok(seen.len())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        let ok = [x0, x1, y0, y1].iter().all(|v| v.is_finite()) && x1 > x0 && y1 > y0;
        if !ok {
            return Err(RegionError::BadBox);
        }
        Ok(Self { x0, x1, y0, y1 })
    }

    /// Bounding box of the rows of `data` (first two columns), grown by
    /// `margin` of its extent on every side.
    pub fn around(data: &Tensor, margin: f64) -> Result<Self> {
        if data.rows() == 0 {
            return Err(RegionError::EmptyData);
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..data.rows() {
            let r = data.row(i);
            x0 = x0.min(r[0]);
            x1 = x1.max(r[0]);
            y0 = y0.min(r[1]);
            y1 = y1.max(r[1]);
        }
        let pad = |lo: f64, hi: f64| {
            let e = if hi > lo { hi - lo } else { 1.0 };
            (lo - margin * e, hi + margin * e)
        };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Self::new(x0, x1, y0, y1)
    }
}

/// Activation patterns sampled on an `r × r` grid; cell `(i, j)` (column
/// `i`, row `j`, rows counted upward) is represented by its lower-left
/// corner, so the samples of resolution `r` are a subset of those of `2r`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub bbox: BBox,
    pub resolution: usize,
    /// Row-major (`j * r + i`) index into `code_table`.
    pub cell_code: Vec<usize>,
    /// Distinct patterns in order of first appearance.
    pub code_table: Vec<Vec<bool>>,
    /// Unit cell edges separating different patterns, as
    /// `((x, y), (x, y))` endpoints in input coordinates.
    pub boundaries: Vec<((f64, f64), (f64, f64))>,
}

impl RegionMap {
    pub fn distinct(&self) -> usize {
        self.code_table.len()
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let (w, h) = self.cell_size();
        (self.bbox.x0 + (i as f64 + 0.5) * w, self.bbox.y0 + (j as f64 + 0.5) * h)
    }

    pub fn cell_size(&self) -> (f64, f64) {
        let r = self.resolution as f64;
        ((self.bbox.x1 - self.bbox.x0) / r, (self.bbox.y1 - self.bbox.y0) / r)
    }

    fn code(&self, i: usize, j: usize) -> usize {
        self.cell_code[j * self.resolution + i]
    }
}

pub fn build_region_map<M: ActivationPattern + ?Sized>(model: &M, bbox: BBox, resolution: usize) -> Result<RegionMap> {
    if model.input_dim() != 2 {
        return Err(RegionError::InputDim(model.input_dim()));
    }
    if resolution < MIN_RESOLUTION {
        return Err(RegionError::Resolution(resolution));
    }
    let r = resolution;
    let (w, h) = ((bbox.x1 - bbox.x0) / r as f64, (bbox.y1 - bbox.y0) / r as f64);
    let mut ids: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
    let mut code_table = Vec::new();
    let mut cell_code = Vec::with_capacity(r * r);
    for j in 0..r {
        let y = bbox.y0 + j as f64 * h;
        let row = Tensor::matrix(r, 2, (0..r).flat_map(|i| [bbox.x0 + i as f64 * w, y]).collect());
        for p in model.patterns(&row)? {
            let next = code_table.len();
            let id = *ids.entry(p.clone()).or_insert_with(|| {
                code_table.push(p);
                next
            });
            cell_code.push(id);
        }
    }
    let mut map = RegionMap { bbox, resolution, cell_code, code_table, boundaries: Vec::new() };
    for j in 0..r {
        for i in 0..r {
            let (x, y) = (bbox.x0 + i as f64 * w, bbox.y0 + j as f64 * h);
            if i + 1 < r && map.code(i, j) != map.code(i + 1, j) {
                map.boundaries.push(((x + w, y), (x + w, y + h)));
            }
            if j + 1 < r && map.code(i, j) != map.code(i, j + 1) {
                map.boundaries.push(((x, y + h), (x + w, y + h)));
            }
        }
    }
    Ok(map)
}

const SVG_SIZE: f64 = 512.0;
const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn region_color(index: usize) -> String {
    let hue = (index as f64 * GOLDEN).fract() * 360.0;
    format!("hsl({hue:.1},60%,72%)")
}

const LABEL_COLORS: [&str; 6] = ["#1b1b1b", "#ffffff", "#c0392b", "#1f5fa8", "#2e8b57", "#8e44ad"];

/// SVG text for `map`; `points` are optional labelled input rows drawn as
/// dots. Regions are colored by pattern index, boundaries drawn as one path.
pub fn region_svg(map: &RegionMap, points: Option<(&Tensor, &[usize])>) -> String {
    let b = map.bbox;
    let sx = |x: f64| (x - b.x0) / (b.x1 - b.x0) * SVG_SIZE;
    let sy = |y: f64| SVG_SIZE - (y - b.y0) / (b.y1 - b.y0) * SVG_SIZE;
    let r = map.resolution;
    let cell = SVG_SIZE / r as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">",
        s = SVG_SIZE
    );
    let _ = writeln!(out, "<g shape-rendering=\"crispEdges\" stroke=\"none\">");
    for j in 0..r {
        let top = SVG_SIZE - (j + 1) as f64 * cell;
        let mut i = 0;
        while i < r {
            let code = map.code(i, j);
            let start = i;
            while i < r && map.code(i, j) == code {
                i += 1;
            }
            let _ = writeln!(
                out,
                "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\"/>",
                start as f64 * cell,
                top,
                (i - start) as f64 * cell,
                cell,
                region_color(code)
            );
        }
    }
    out.push_str("</g>\n");
    if !map.boundaries.is_empty() {
        let mut d = String::new();
        for &((xa, ya), (xb, yb)) in &map.boundaries {
            let _ = write!(d, "M{:.3} {:.3}L{:.3} {:.3}", sx(xa), sy(ya), sx(xb), sy(yb));
        }
        let _ = writeln!(out, "<path class=\"boundary\" fill=\"none\" stroke=\"#222222\" stroke-width=\"1\" d=\"{d}\"/>");
    }
    if let Some((x, labels)) = points {
        out.push_str("<g class=\"points\" stroke=\"#000000\" stroke-width=\"0.4\">\n");
        for (i, &label) in labels.iter().enumerate().take(x.rows()) {
            let p = x.row(i);
            let _ = writeln!(
                out,
                "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"1.8\" fill=\"{}\"/>",
                sx(p[0]),
                sy(p[1]),
                LABEL_COLORS[label % LABEL_COLORS.len()]
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

pub fn render_region_svg(map: &RegionMap, points: Option<(&Tensor, &[usize])>, path: &Path) -> Result<()> {
    std::fs::write(path, region_svg(map, points))
        .map_err(|source| RegionError::Io { path: path.display().to_string(), source })
}

pub const STATS_HEADER: &str = "resolution,distinct_patterns,dataset_distinct_codes";

/// Resolutions `16, 32, …` doubling up to `max`, with `max` itself last.
pub fn resolution_ladder(max: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut r = MIN_RESOLUTION;
    while r < max {
        out.push(r);
        r *= 2;
    }
    out.push(max);
    out
}

/// CSV rows of grid pattern counts per resolution; the dataset column holds
/// the projection-code count on `data`, or is empty without data.
pub fn region_stats_csv(model: &EncoderModel, bbox: BBox, resolutions: &[usize], data: Option<&Tensor>) -> Result<String> {
    let dataset = match data {
        Some(x) => count_distinct_codes(model, x, CodeLayer::Projection)?.to_string(),
        None => String::new(),
    };
    let mut out = format!("{STATS_HEADER}\n");
    for &r in resolutions {
        let map = build_region_map(model, bbox, r)?;
        let _ = writeln!(out, "{r},{},{dataset}", map.distinct());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth, Kind};
    use crate::model::{init_model, ModelDims};
    use rand::Rng;
    use crate::rng::{stream, streams};

    fn unit_box() -> BBox {
        BBox::new(-3.0, 3.0, -3.0, 3.0).unwrap()
    }

    /// `n` lines tangent to the circle of radius 0.5, normals spread over
    /// half a turn, so every pair meets inside the box.
    fn arrangement(n: usize) -> Dense {
        let mut layer = Dense::zeros(2, n);
        for k in 0..n {
            let t = std::f64::consts::PI * (k as f64 + 0.3) / n as f64;
            layer.weight.data_mut()[2 * k] = t.cos();
            layer.weight.data_mut()[2 * k + 1] = t.sin();
            layer.bias.data_mut()[k] = -0.5;
        }
        layer
    }

    #[test]
    fn arrangement_counts() {
        for n in 1..=5 {
            let expected = 1 + n + n * (n - 1) / 2;
            let map = build_region_map(&arrangement(n), unit_box(), 256).unwrap();
            assert_eq!(map.distinct(), expected, "n = {n}");
        }
    }

    #[test]
    fn counts_grow_with_resolution() {
        let model = init_model(&ModelDims::new(2, vec![12, 12], 6), 2).unwrap();
        let mut trained_like = model.clone();
        let mut rng = stream(1, streams::GRADCHECK);
        for p in trained_like.net.params_mut() {
            if p.shape().len() == 1 {
                p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            }
        }
        for m in [&model, &trained_like] {
            let counts: Vec<usize> = [16, 32, 64, 128]
                .iter()
                .map(|&r| build_region_map(m, unit_box(), r).unwrap().distinct())
                .collect();
            assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
        }
    }

    #[test]
    fn cells_sharing_a_pattern_are_affine() {
        let mut model = init_model(&ModelDims::new(2, vec![10, 8], 5), 4).unwrap();
        let mut rng = stream(2, streams::GRADCHECK);
        for p in model.net.params_mut() {
            if p.shape().len() == 1 {
                p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        let map = build_region_map(&model, unit_box(), 32).unwrap();
        let (w, h) = map.cell_size();
        let mut checked = 0;
        for j in 0..32 {
            for i in 0..32 {
                let (cx, cy) = map.cell_center(i, j);
                let a = [cx - 0.3 * w, cy - 0.2 * h];
                let b = [cx + 0.25 * w, cy + 0.35 * h];
                let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                let x = Tensor::matrix(3, 2, vec![a[0], a[1], b[0], b[1], mid[0], mid[1]]);
                let pats = model.patterns(&x).unwrap();
                if pats[0] != pats[1] || pats[0] != pats[2] {
                    continue;
                }
                let out = model.forward(&x).unwrap().a;
                for d in 0..out.cols() {
                    let lin = 0.5 * (out.row(0)[d] + out.row(1)[d]);
                    assert!((out.row(2)[d] - lin).abs() < 1e-9);
                }
                checked += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn zero_model_is_a_single_region() {
        let mut model = init_model(&ModelDims::new(2, vec![4], 3), 1).unwrap();
        for p in model.net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let map = build_region_map(&model, unit_box(), 16).unwrap();
        assert_eq!(map.distinct(), 1);
        assert!(map.boundaries.is_empty());
        let svg = region_svg(&map, None);
        assert!(!svg.contains("<path"));
        let data = synth(Kind::Rings, 64, 0.1, 2, 0).unwrap();
        assert_eq!(count_distinct_codes(&model, &data.features, CodeLayer::Projection).unwrap(), 1);
        assert_eq!(count_distinct_codes(&model, &data.features, CodeLayer::Last).unwrap(), 1);
    }

    #[test]
    fn injective_codes_count_every_point() {
        // identity-like single layer on the rows of a 4-point sign pattern
        let mut model = init_model(&ModelDims::new(2, vec![2], 2), 1).unwrap();
        for p in model.net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        model.net.encoder[0].weight = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        model.net.encoder[0].bias = Tensor::vector(vec![1.0, 1.0]);
        model.net.projection.hidden.weight = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        model.net.projection.output.weight = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        model.net.projection.output.bias = Tensor::vector(vec![-1.5, -1.5]);
        let x = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(count_distinct_codes(&model, &x, CodeLayer::Projection).unwrap(), 4);
        assert!(matches!(
            count_distinct_codes(&model, &Tensor::zeros(&[0, 2]), CodeLayer::Projection),
            Err(RegionError::EmptyData)
        ));
    }

    #[test]
    fn arrangement_of_two_lines_renders_four_colors() {
        let map = build_region_map(&arrangement(2), unit_box(), 64).unwrap();
        assert_eq!(map.distinct(), 4);
        let svg = region_svg(&map, None);
        let fills: std::collections::BTreeSet<&str> =
            svg.split("fill=\"").skip(1).filter_map(|s| s.split('"').next()).filter(|f| f.starts_with("hsl")).collect();
        assert_eq!(fills.len(), 4);
        assert_eq!(svg.matches("<path").count(), 1);
        assert_eq!(svg, region_svg(&map, None));
    }

    #[test]
    fn svg_files_are_reproducible() {
        let model = init_model(&ModelDims::new(2, vec![6], 3), 9).unwrap();
        let data = synth(Kind::Moons, 32, 0.1, 2, 0).unwrap();
        let map = build_region_map(&model, BBox::around(&data.features, 0.1).unwrap(), 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
        render_region_svg(&map, Some((&data.features, &data.labels)), &a).unwrap();
        render_region_svg(&map, Some((&data.features, &data.labels)), &b).unwrap();
        let bytes = std::fs::read(&a).unwrap();
        assert_eq!(bytes, std::fs::read(&b).unwrap());
        assert_eq!(String::from_utf8(bytes).unwrap().matches("<circle").count(), 32);
        assert!(render_region_svg(&map, None, &dir.path().join("missing/x.svg")).is_err());
    }

    #[test]
    fn map_preconditions() {
        let model = init_model(&ModelDims::new(3, vec![4], 2), 1).unwrap();
        assert!(matches!(build_region_map(&model, unit_box(), 16), Err(RegionError::InputDim(3))));
        let model = init_model(&ModelDims::new(2, vec![4], 2), 1).unwrap();
        assert!(matches!(build_region_map(&model, unit_box(), 15), Err(RegionError::Resolution(15))));
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn stats_csv_layout() {
        let model = init_model(&ModelDims::new(2, vec![6], 3), 9).unwrap();
        let data = synth(Kind::Rings, 32, 0.1, 2, 0).unwrap();
        assert_eq!(resolution_ladder(64), vec![16, 32, 64]);
        assert_eq!(resolution_ladder(48), vec![16, 32, 48]);
        assert_eq!(resolution_ladder(16), vec![16]);
        let csv = region_stats_csv(&model, unit_box(), &[16, 32], Some(&data.features)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], STATS_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("16,"));
        let no_data = region_stats_csv(&model, unit_box(), &[16], None).unwrap();
        assert!(no_data.lines().nth(1).unwrap().ends_with(','));
    }
}
