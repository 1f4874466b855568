//! Invariants of the patch transforms on randomized cuboids. Each check
//! returns the first violation it finds.

use fastano::transform::{
    apply_patch_anomaly, inverse_permutation, srt, tmt, Frame, FrameCuboid, PatchConfig, PatchRegion, Rotation,
    TransformMode, TransformPolicy,
};
use rand::seq::SliceRandom;
use rand::Rng;

use super::rng;

pub struct Case {
    pub cuboid: FrameCuboid,
    pub region: PatchRegion,
    /// Square regions admit every rotation; others only 0 and 180.
    pub square: bool,
}

pub fn random_cuboid(r: &mut impl Rng, n: usize, h: usize, w: usize) -> FrameCuboid {
    let frames: Vec<Frame> = (0..n)
        .map(|_| Frame::new(h, w, (0..h * w).map(|_| r.random_range(-1.0f32..=1.0)).collect()).unwrap())
        .collect();
    FrameCuboid::from_frames(&frames.iter().collect::<Vec<_>>(), n).unwrap()
}

pub fn random_case(r: &mut impl Rng) -> Case {
    let n = r.random_range(1..=7);
    let h = r.random_range(2..=20);
    let w = r.random_range(2..=20);
    let square = r.random_bool(0.7);
    let (ph, pw) = if square {
        let s = r.random_range(1..=h.min(w));
        (s, s)
    } else {
        (r.random_range(1..=h), r.random_range(1..=w))
    };
    let region = PatchRegion {
        x: r.random_range(0..=w - pw),
        y: r.random_range(0..=h - ph),
        width: pw,
        height: ph,
    };
    Case {
        cuboid: random_cuboid(r, n, h, w),
        region,
        square: square || ph == pw,
    }
}

fn rotations(r: &mut impl Rng, n: usize, square: bool) -> Vec<Rotation> {
    let pool: &[Rotation] = if square { &Rotation::ALL } else { &[Rotation::R0, Rotation::R180] };
    (0..n).map(|_| pool[r.random_range(0..pool.len())]).collect()
}

fn opposite(d: Rotation) -> Rotation {
    Rotation::from_degrees((360 - d.degrees()) % 360).unwrap()
}

fn inside(region: &PatchRegion, y: usize, x: usize) -> bool {
    (region.y..region.y + region.height).contains(&y) && (region.x..region.x + region.width).contains(&x)
}

fn sorted_bits(values: impl Iterator<Item = f32>) -> Vec<u32> {
    let mut v: Vec<u32> = values.map(f32::to_bits).collect();
    v.sort_unstable();
    v
}

fn patch_values(c: &FrameCuboid, t: usize, region: &PatchRegion) -> Vec<f32> {
    let s = c.slice(t);
    let mut out = Vec::with_capacity(region.width * region.height);
    for y in region.y..region.y + region.height {
        out.extend_from_slice(&s[y * c.width() + region.x..y * c.width() + region.x + region.width]);
    }
    out
}

/// Pixels outside `region` equal in every frame.
fn outside_equal(a: &FrameCuboid, b: &FrameCuboid, region: &PatchRegion) -> bool {
    (0..a.frames()).all(|t| {
        let (sa, sb) = (a.slice(t), b.slice(t));
        (0..a.height()).all(|y| {
            (0..a.width()).all(|x| inside(region, y, x) || sa[y * a.width() + x].to_bits() == sb[y * a.width() + x].to_bits())
        })
    })
}

/// Reference quarter turn, counter-clockwise: source pixel `(r, c)` lands at `(s−1−c, r)`.
fn rotate_reference(src: &[f32], s: usize, d: Rotation) -> Vec<f32> {
    let mut cur = src.to_vec();
    for _ in 0..d.degrees() / 90 {
        let mut next = vec![0.0; s * s];
        for r in 0..s {
            for c in 0..s {
                next[(s - 1 - c) * s + r] = cur[r * s + c];
            }
        }
        cur = next;
    }
    cur
}

pub fn identity(c: &Case) -> Result<(), String> {
    let n = c.cuboid.frames();
    let s = srt(c.cuboid.clone(), &c.region, &vec![Rotation::R0; n]).unwrap();
    if s != c.cuboid {
        return Err("SRT with all-zero directions changed the cuboid".into());
    }
    let t = tmt(c.cuboid.clone(), &c.region, &(0..n).collect::<Vec<_>>()).unwrap();
    if t != c.cuboid {
        return Err("TMT with the identity permutation changed the cuboid".into());
    }
    Ok(())
}

pub fn involution(c: &Case, r: &mut impl Rng) -> Result<(), String> {
    let n = c.cuboid.frames();
    let half = vec![Rotation::R180; n];
    let twice = srt(srt(c.cuboid.clone(), &c.region, &half).unwrap(), &c.region, &half).unwrap();
    if twice != c.cuboid {
        return Err("180-degree SRT applied twice is not the identity".into());
    }
    let dirs = rotations(r, n, c.square);
    let back: Vec<Rotation> = dirs.iter().map(|&d| opposite(d)).collect();
    let undone = srt(srt(c.cuboid.clone(), &c.region, &dirs).unwrap(), &c.region, &back).unwrap();
    if undone != c.cuboid {
        return Err(format!("SRT by {dirs:?} then the opposite turns did not restore the cuboid"));
    }
    Ok(())
}

pub fn inverse_permutation_restores(c: &Case, r: &mut impl Rng) -> Result<(), String> {
    let n = c.cuboid.frames();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(r);
    let mixed = tmt(c.cuboid.clone(), &c.region, &perm).unwrap();
    for (t, &src) in perm.iter().enumerate() {
        if patch_values(&mixed, t, &c.region) != patch_values(&c.cuboid, src, &c.region) {
            return Err(format!("TMT {perm:?}: frame {t} does not carry input frame {src}'s patch"));
        }
    }
    let restored = tmt(mixed, &c.region, &inverse_permutation(&perm)).unwrap();
    if restored != c.cuboid {
        return Err(format!("TMT {perm:?} followed by its inverse did not restore the cuboid"));
    }
    Ok(())
}

pub fn rotation_matches_reference(c: &Case, r: &mut impl Rng) -> Result<(), String> {
    if !c.square {
        return Ok(());
    }
    let n = c.cuboid.frames();
    let dirs = rotations(r, n, true);
    let out = srt(c.cuboid.clone(), &c.region, &dirs).unwrap();
    for (t, &d) in dirs.iter().enumerate() {
        let want = rotate_reference(&patch_values(&c.cuboid, t, &c.region), c.region.width, d);
        if patch_values(&out, t, &c.region) != want {
            return Err(format!("frame {t} rotated by {} differs from the reference turn", d.degrees()));
        }
    }
    Ok(())
}

const POLICIES: [TransformPolicy; 5] = [
    TransformPolicy::TmtOnly,
    TransformPolicy::SrtOnly,
    TransformPolicy::TmtOrSrtChunk,
    TransformPolicy::TmtOrSrt,
    TransformPolicy::TmtAndSrt,
];

/// Random policy draw on the case's cuboid with a square patch that fits.
pub fn outside_untouched_and_conserved(c: &Case, r: &mut impl Rng) -> Result<(), String> {
    let (h, w) = (c.cuboid.height(), c.cuboid.width());
    let side = r.random_range(1..=h.min(w));
    let patch = PatchConfig {
        margin_frac: 0.0,
        ..PatchConfig::square(side)
    };
    let policy = POLICIES[r.random_range(0..POLICIES.len())];
    let (out, spec) = apply_patch_anomaly(c.cuboid.clone(), r, policy, &patch).unwrap();
    let region = spec.region.ok_or("non-baseline policy recorded no region")?;
    if !outside_equal(&out, &c.cuboid, &region) {
        return Err(format!("{policy}: pixels outside {region} changed"));
    }
    let n = c.cuboid.frames();
    // SRT keeps each frame's patch multiset; TMT keeps the multiset of the whole patch cuboid
    if spec.mode == TransformMode::Srt {
        for t in 0..n {
            let a = sorted_bits(patch_values(&out, t, &region).into_iter());
            let b = sorted_bits(patch_values(&c.cuboid, t, &region).into_iter());
            if a != b {
                return Err(format!("{policy}: frame {t} patch multiset changed under SRT"));
            }
        }
    }
    let all = |x: &FrameCuboid| sorted_bits((0..n).flat_map(|t| patch_values(x, t, &region)));
    if all(&out) != all(&c.cuboid) {
        return Err(format!("{policy}: patch cuboid multiset changed"));
    }
    if spec.replay(c.cuboid.clone()).unwrap() != out {
        return Err(format!("{policy}: replaying the recorded spec differs"));
    }
    Ok(())
}

/// Runs every invariant on `cuboids` random cases; returns the first failure.
pub fn run(cuboids: usize) -> Result<(), String> {
    let mut r = rng(201);
    for i in 0..cuboids {
        let c = random_case(&mut r);
        let checks = [
            identity(&c),
            involution(&c, &mut r),
            inverse_permutation_restores(&c, &mut r),
            rotation_matches_reference(&c, &mut r),
            outside_untouched_and_conserved(&c, &mut r),
        ];
        for res in checks {
            res.map_err(|e| format!("cuboid {i}: {e}"))?;
        }
    }
    Ok(())
}
