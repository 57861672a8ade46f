//! Overlap and topology metrics: Dice, IoU, Zhang–Suen skeletons and clDice.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer label raster with a declared class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    h: usize,
    w: usize,
    labels: Vec<u8>,
    num_classes: usize,
}

impl SegMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::Shape(format!("{} labels for a {h}x{w} mask", labels.len())));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::Argument(format!("unsupported class count {num_classes}")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Argument(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(SegMask { h, w, labels, num_classes })
    }

    /// From a `[H, W]` or `[1, H, W]` tensor of non-negative integer values.
    pub fn from_tensor(t: &Tensor, num_classes: usize) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(Error::Shape(format!("mask tensor must be a single plane, got {s:?}"))),
        };
        let mut labels = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v < 0.0 || v.fract() != 0.0 || v >= num_classes as f64 {
                return Err(Error::Argument(format!("mask value {v} is not a label below {num_classes}")));
            }
            labels.push(v as u8);
        }
        Self::new(h, w, labels, num_classes)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.h, self.w], self.labels.iter().map(|&l| l as f64).collect())
    }

    /// Per-pixel argmax of `[K, H, W]` scores.
    pub fn argmax(scores: &Tensor) -> Result<Self> {
        scores.expect_rank(3)?;
        let (k, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
        let d = scores.data();
        let labels = (0..h * w)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * h * w + p] > d[best * h * w + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Self::new(h, w, labels, k)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_mask(&self, cls: usize) -> BinaryMask {
        BinaryMask { h: self.h, w: self.w, bits: self.labels.iter().map(|&l| l as usize == cls).collect() }
    }

    fn check_pair(&self, other: &SegMask, cls: usize) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::Shape(format!("mask sizes differ: {}x{} vs {}x{}", self.h, self.w, other.h, other.w)));
        }
        if cls >= self.num_classes.max(other.num_classes) {
            return Err(Error::Argument(format!("class {cls} out of range")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Shape(format!("{} pixels for a {h}x{w} mask", bits.len())));
        }
        Ok(BinaryMask { h, w, bits })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        BinaryMask { h, w, bits: vec![false; h * w] }
    }

    /// Builds a mask from rows of `'#'` (foreground) and any other character.
    pub fn from_ascii(rows: &[&str]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Shape("ragged ascii mask".into()));
        }
        Self::new(h, w, rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.w + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// True if some 2×2 square is entirely foreground.
    pub fn has_full_2x2(&self) -> bool {
        (1..self.h).any(|r| {
            (1..self.w).any(|c| self.get(r - 1, c - 1) && self.get(r - 1, c) && self.get(r, c - 1) && self.get(r, c))
        })
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::Shape(format!("mask sizes differ: {}x{} vs {}x{}", self.h, self.w, other.h, other.w)));
        }
        Ok(())
    }
}

/// Number of 8-connected foreground components.
pub fn count_components(m: &BinaryMask) -> usize {
    let mut seen = vec![false; m.bits.len()];
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..m.bits.len() {
        if !m.bits[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / m.w) as isize, (p % m.w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= m.h as isize || nc >= m.w as isize {
                        continue;
                    }
                    let q = nr as usize * m.w + nc as usize;
                    if m.bits[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
    }
    count
}

fn overlap_ratio(inter: usize, denom: usize, numer_scale: f64) -> f64 {
    if denom == 0 {
        1.0
    } else {
        numer_scale * inter as f64 / denom as f64
    }
}

pub fn binary_dice(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    p.check_same(g)?;
    Ok(overlap_ratio(p.intersection_count(g), p.count() + g.count(), 2.0))
}

pub fn binary_iou(p: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    p.check_same(g)?;
    let inter = p.intersection_count(g);
    Ok(overlap_ratio(inter, p.count() + g.count() - inter, 1.0))
}

/// Dice of class `cls`; two empty masks score 1.
pub fn dice(pred: &SegMask, gt: &SegMask, cls: usize) -> Result<f64> {
    pred.check_pair(gt, cls)?;
    binary_dice(&pred.class_mask(cls), &gt.class_mask(cls))
}

pub fn iou(pred: &SegMask, gt: &SegMask, cls: usize) -> Result<f64> {
    pred.check_pair(gt, cls)?;
    binary_iou(&pred.class_mask(cls), &gt.class_mask(cls))
}

fn foreground_mean(pred: &SegMask, gt: &SegMask, f: impl Fn(usize) -> Result<f64>) -> Result<f64> {
    let k = pred.num_classes.max(gt.num_classes);
    if k < 2 {
        return Err(Error::Argument("metrics need at least one foreground class".into()));
    }
    let mut s = 0.0;
    for c in 1..k {
        s += f(c)?;
    }
    Ok(s / (k - 1) as f64)
}

/// Mean IoU over foreground classes.
pub fn miou(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    foreground_mean(pred, gt, |c| iou(pred, gt, c))
}

/// Mean Dice over foreground classes.
pub fn mean_dice(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    foreground_mean(pred, gt, |c| dice(pred, gt, c))
}

/// Mean clDice over foreground classes.
pub fn mean_cl_dice(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    pred.check_pair(gt, 0)?;
    foreground_mean(pred, gt, |c| cl_dice(&pred.class_mask(c), &gt.class_mask(c)))
}

/// One-pixel-wide centerline of a binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skeleton(BinaryMask);

impl Skeleton {
    pub fn mask(&self) -> &BinaryMask {
        &self.0
    }

    pub fn into_mask(self) -> BinaryMask {
        self.0
    }
}

/// Neighbours P2..P9 (N, NE, E, SE, S, SW, W, NW); outside pixels are background.
fn neighbours(m: &BinaryMask, r: usize, c: usize) -> [bool; 8] {
    const D: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];
    let mut out = [false; 8];
    for (o, (dr, dc)) in out.iter_mut().zip(D) {
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        *o = nr >= 0 && nc >= 0 && nr < m.h as isize && nc < m.w as isize && m.get(nr as usize, nc as usize);
    }
    out
}

/// `(A, B)`: 0→1 transitions around the ring, and foreground neighbour count.
fn ring_stats(p: &[bool; 8]) -> (usize, usize) {
    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
    let b = p.iter().filter(|&&v| v).count();
    (a, b)
}

/// Zhang–Suen thinning, run until a full pass deletes nothing.
///
/// Candidates of each sub-iteration are chosen on a snapshot as usual, then
/// removed in raster order only while they are still deletable in the
/// current image (one ring run, at least one neighbour). The plain parallel
/// scheme can erase 2×2 blocks and break diagonal lines; the re-check keeps
/// every 8-connected component alive.
pub fn skeletonize(mask: &BinaryMask) -> Skeleton {
    let mut m = mask.clone();
    let mut candidates = Vec::new();
    loop {
        let mut changed = false;
        for sub in 0..2 {
            candidates.clear();
            for r in 0..m.h {
                for c in 0..m.w {
                    if !m.get(r, c) {
                        continue;
                    }
                    let p = neighbours(&m, r, c);
                    let (a, b) = ring_stats(&p);
                    let [p2, _, p4, _, p6, _, p8, _] = p;
                    let cond = if sub == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        candidates.push((r, c));
                    }
                }
            }
            for &(r, c) in &candidates {
                let (a, b) = ring_stats(&neighbours(&m, r, c));
                if a == 1 && (1..=6).contains(&b) {
                    m.set(r, c, false);
                    changed = true;
                }
            }
        }
        if !changed {
            return Skeleton(m);
        }
    }
}

/// Centerline Dice: harmonic mean of topology precision
/// `|skel(P) ∩ G| / |skel(P)|` and sensitivity `|skel(G) ∩ P| / |skel(G)|`.
/// Both skeletons empty scores 1; exactly one empty scores 0.
pub fn cl_dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same(gt)?;
    let sp = skeletonize(pred);
    let sg = skeletonize(gt);
    let (np, ng) = (sp.0.count(), sg.0.count());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let tprec = sp.0.intersection_count(gt) as f64 / np as f64;
    let tsens = sg.0.intersection_count(pred) as f64 / ng as f64;
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

/// Scores of one foreground class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub class: usize,
    pub dice: f64,
    pub iou: f64,
    pub cl_dice: f64,
}

/// Per-case scores: foreground means plus the per-class breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub dice: f64,
    pub miou: f64,
    pub cl_dice: f64,
    pub classes: Vec<ClassScores>,
}

pub fn evaluate(pred: &SegMask, gt: &SegMask) -> Result<Scores> {
    let k = pred.num_classes.max(gt.num_classes);
    let mut classes = Vec::new();
    for class in 1..k {
        pred.check_pair(gt, class)?;
        let (p, g) = (pred.class_mask(class), gt.class_mask(class));
        classes.push(ClassScores {
            class,
            dice: binary_dice(&p, &g)?,
            iou: binary_iou(&p, &g)?,
            cl_dice: cl_dice(&p, &g)?,
        });
    }
    Ok(Scores { dice: mean_dice(pred, gt)?, miou: miou(pred, gt)?, cl_dice: mean_cl_dice(pred, gt)?, classes })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(rows: &[&str]) -> SegMask {
        let b = BinaryMask::from_ascii(rows).unwrap();
        SegMask::new(b.h, b.w, b.bits.iter().map(|&v| v as u8).collect(), 2).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = seg(&["##..", "##..", "....", "...."]);
        let b = seg(&["....", "....", "..##", "..##"]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(iou(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(iou(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn overlapping_blocks_hand_count() {
        let p = seg(&["##.", "##.", "..."]);
        let g = seg(&[".##", ".##", "..."]);
        assert_eq!(dice(&p, &g, 1).unwrap(), 0.5);
        assert_eq!(iou(&p, &g, 1).unwrap(), 2.0 / 6.0);
    }

    #[test]
    fn empty_vs_empty_is_one() {
        let e = seg(&["...", "..."]);
        assert_eq!(dice(&e, &e, 1).unwrap(), 1.0);
        assert_eq!(miou(&e, &e).unwrap(), 1.0);
        assert_eq!(cl_dice(&e.class_mask(1), &e.class_mask(1)).unwrap(), 1.0);
    }

    #[test]
    fn class_out_of_range() {
        let a = seg(&["#."]);
        assert!(dice(&a, &a, 2).is_err());
        assert!(SegMask::new(1, 2, vec![0, 3], 2).is_err());
    }

    #[test]
    fn line_is_its_own_skeleton() {
        let m = BinaryMask::from_ascii(&["..........", ".########.", ".........."]).unwrap();
        assert_eq!(skeletonize(&m).mask(), &m);
        let empty = BinaryMask::empty(4, 4);
        assert_eq!(skeletonize(&empty).mask(), &empty);
    }

    #[test]
    fn filled_square_thins_to_centre() {
        // Hand run: the first pass removes the south/east rim plus (0,0),
        // then the north/west rim plus (3,3); the second pass leaves
        // (1,2), (2,1), (2,2) and then only the centre.
        let m = BinaryMask::from_ascii(&["#####", "#####", "#####", "#####", "#####"]).unwrap();
        let s = skeletonize(&m);
        let expect = BinaryMask::from_ascii(&[".....", ".....", "..#..", ".....", "....."]).unwrap();
        assert_eq!(s.mask(), &expect);
        assert!(s.mask().is_subset_of(&m));
        assert!(!s.mask().has_full_2x2());
    }

    #[test]
    fn two_by_two_block_keeps_a_pixel() {
        let m = BinaryMask::from_ascii(&["....", ".##.", ".##.", "...."]).unwrap();
        let s = skeletonize(&m);
        assert_eq!(s.mask().count(), 1);
        assert_eq!(count_components(s.mask()), 1);
    }

    #[test]
    fn broken_line_cl_dice() {
        let gt =
            BinaryMask::from_ascii(&["......................", ".####################.", "......................"])
                .unwrap();
        let pred =
            BinaryMask::from_ascii(&["......................", ".#######.....########.", "......................"])
                .unwrap();
        assert_eq!(skeletonize(&gt).mask(), &gt);
        assert_eq!(skeletonize(&pred).mask(), &pred);
        let v = cl_dice(&pred, &gt).unwrap();
        assert!((v - 2.0 * 0.75 / 1.75).abs() < 1e-15);
    }

    #[test]
    fn cl_dice_identity_and_disjoint() {
        let a = BinaryMask::from_ascii(&["........", ".######.", ".######.", ".######.", "........"]).unwrap();
        let b = BinaryMask::from_ascii(&["#.......", "#.......", "#.......", "#.......", "#......."]).unwrap();
        assert_eq!(cl_dice(&a, &a).unwrap(), 1.0);
        assert_eq!(cl_dice(&a, &b).unwrap(), 0.0);
        assert_eq!(cl_dice(&a, &BinaryMask::empty(5, 8)).unwrap(), 0.0);
    }

    #[test]
    fn argmax_picks_largest_score() {
        let s = Tensor::new(vec![2, 1, 3], vec![0.0, 1.0, -1.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(SegMask::argmax(&s).unwrap().labels(), &[1, 0, 1]);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
