//! Volume formats and transforms: NIfTI roundtrips (including gzip, big
//! endian, and scl scaling), raw+sidecar roundtrips, windowing, resampling,
//! and augmentation determinism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unest::nifti::{read_nifti, read_nifti_labels, read_raw, write_nifti, write_raw};
use unest::volume::{augment, foreground_crop, Volume, VolumeKind};

fn vol(extents: [usize; 3], spacing: [f64; 3], kind: VolumeKind, data: Vec<f64>) -> Volume {
    Volume::new(extents, spacing, kind, data).unwrap()
}

fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}

#[test]
fn nifti_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f64> = (0..4 * 5 * 6).map(|_| rng.gen_range(-1e3..1e3)).collect();
    let v = vol([4, 5, 6], [1.0, 1.5, 2.0], VolumeKind::Intensity, data);

    for name in ["v.nii", "v.nii.gz"] {
        let path = dir.path().join(name);
        write_nifti(&path, &v).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.extents, v.extents);
        assert_eq!(back.spacing.map(|s| s as f32), v.spacing.map(|s| s as f32));
        assert_eq!(back.data, v.data, "{name}");
        // Write what was read; values survive a second trip bitwise.
        let again = dir.path().join(format!("again-{name}"));
        write_nifti(&again, &back).unwrap();
        assert_eq!(read_nifti(&again).unwrap().data, v.data);
    }
}

#[test]
fn nifti_label_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f64> = (0..27).map(|i| (i % 4) as f64).collect();
    let v = vol([3, 3, 3], [1.0; 3], VolumeKind::Label, data);
    let path = dir.path().join("seg.nii");
    write_nifti(&path, &v).unwrap();
    let back = read_nifti_labels(&path).unwrap();
    assert_eq!(back.kind, VolumeKind::Label);
    assert_eq!(back.data, v.data);

    // The same file read as intensity carries the same values.
    assert_eq!(read_nifti(&path).unwrap().data, v.data);
}

/// Hand-built minimal header; `swap` flips every field to big endian.
fn synth_nifti(extents: [usize; 3], pixdim: [f32; 3], values: &[f32], swap: bool) -> Vec<u8> {
    let n: usize = extents.iter().product();
    assert_eq!(values.len(), n);
    let mut b = vec![0u8; 352 + 4 * n];
    let w32 = |b: &mut [u8], off: usize, v: u32| {
        b[off..off + 4].copy_from_slice(&(if swap { v.swap_bytes() } else { v }).to_le_bytes());
    };
    let w16 = |b: &mut [u8], off: usize, v: u16| {
        b[off..off + 2].copy_from_slice(&(if swap { v.swap_bytes() } else { v }).to_le_bytes());
    };
    w32(&mut b, 0, 348);
    w16(&mut b, 40, 3);
    for a in 0..3 {
        w16(&mut b, 42 + 2 * a, extents[a] as u16);
        w32(&mut b, 80 + 4 * a, pixdim[a].to_bits());
    }
    w16(&mut b, 70, 16); // float32
    w16(&mut b, 72, 32);
    w32(&mut b, 108, 352f32.to_bits());
    b[344..348].copy_from_slice(b"n+1\0");
    // Payload in disk order: x fastest. Extents here are cubic in tests
    // whenever values are order-sensitive.
    for (i, v) in values.iter().enumerate() {
        w32(&mut b, 352 + 4 * i, v.to_bits());
    }
    b
}

#[test]
fn nifti_reads_both_byte_orders() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f32> = (0..8).map(|i| i as f32 * 0.5 - 2.0).collect();
    for (name, swap) in [("le.nii", false), ("be.nii", true)] {
        let path = dir.path().join(name);
        std::fs::write(&path, synth_nifti([2, 2, 2], [1.0, 2.0, 3.0], &values, swap)).unwrap();
        let v = read_nifti(&path).unwrap();
        assert_eq!(v.extents, [2, 2, 2]);
        assert_eq!(v.spacing, [1.0, 2.0, 3.0]);
        // Disk x-fastest vs our depth-fastest: value at disk position
        // (x,y,z) = x + 2y + 4z lands at our (x,y,z).
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(v.at(x, y, z), values[x + 2 * y + 4 * z] as f64, "{name}");
                }
            }
        }
    }
}

#[test]
fn nifti_applies_scl_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = synth_nifti([2, 2, 2], [1.0; 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], false);
    b[112..116].copy_from_slice(&2.0f32.to_le_bytes());
    b[116..120].copy_from_slice(&10.0f32.to_le_bytes());
    let path = dir.path().join("scl.nii");
    std::fs::write(&path, b).unwrap();
    let v = read_nifti(&path).unwrap();
    let mut got = v.data.clone();
    got.sort_by(f64::total_cmp);
    assert_eq!(got, (0..8).map(|i| i as f64 * 2.0 + 10.0).collect::<Vec<_>>());
}

#[test]
fn nifti_rejects_garbage_distinctly() {
    let dir = tempfile::tempdir().unwrap();
    let ok = synth_nifti([2, 2, 2], [1.0; 3], &[0.0; 8], false);

    // Bad magic.
    let mut b = ok.clone();
    b[344..348].copy_from_slice(b"XXXX");
    let p = dir.path().join("magic.nii");
    std::fs::write(&p, &b).unwrap();
    let err = read_nifti(&p).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");

    // Unsupported datatype (128 = RGB).
    let mut b = ok.clone();
    b[70..72].copy_from_slice(&128i16.to_le_bytes());
    let p = dir.path().join("dtype.nii");
    std::fs::write(&p, &b).unwrap();
    let err = read_nifti(&p).unwrap_err().to_string();
    assert!(err.contains("datatype"), "{err}");

    // Truncated payload.
    let p = dir.path().join("short.nii");
    std::fs::write(&p, &ok[..ok.len() - 5]).unwrap();
    let err = read_nifti(&p).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");

    // Not NIfTI at all: full-length noise fails the sizeof_hdr check,
    // anything shorter than a header reads as truncation.
    let p = dir.path().join("noise.nii");
    std::fs::write(&p, [0xabu8; 352]).unwrap();
    let err = read_nifti(&p).unwrap_err().to_string();
    assert!(err.contains("sizeof_hdr"), "{err}");
    let p = dir.path().join("stub.nii");
    std::fs::write(&p, b"hello world, definitely not a header").unwrap();
    let err = read_nifti(&p).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");
}

#[test]
fn raw_sidecar_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    // float32 intensity: values chosen to be exactly representable.
    let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.25 - 3.0).collect();
    let v = vol([2, 3, 4], [1.0, 1.0, 2.0], VolumeKind::Intensity, data);
    let p = dir.path().join("vol.raw");
    write_raw(&p, &v).unwrap();
    let back = read_raw(&p).unwrap();
    assert_eq!((back.extents, back.spacing, back.kind), (v.extents, v.spacing, v.kind));
    assert_eq!(back.data, v.data);

    let lab = vol([2, 3, 4], [1.0; 3], VolumeKind::Label, (0..24).map(|i| (i % 5) as f64).collect());
    let p = dir.path().join("lab.raw");
    write_raw(&p, &lab).unwrap();
    let back = read_raw(&p).unwrap();
    assert_eq!(back.kind, VolumeKind::Label);
    assert_eq!(back.data, lab.data);
}

#[test]
fn raw_sidecar_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vol.raw");
    std::fs::write(&p, [0u8; 16]).unwrap();

    let err = read_raw(&p).unwrap_err().to_string();
    assert!(err.contains("sidecar"), "{err}");

    std::fs::write(
        dir.path().join("vol.raw.meta"),
        "extents = 2 2 2\nspacing = 1 1 1\nkind = intensity\ndtype = float32\n",
    )
    .unwrap();
    let err = read_raw(&p).unwrap_err().to_string();
    assert!(err.contains("bytes"), "{err}");

    std::fs::write(
        dir.path().join("vol.raw.meta"),
        "extents = 2 2 1\nspacing = 1 1 1\nkind = waffles\ndtype = float32\n",
    )
    .unwrap();
    let err = read_raw(&p).unwrap_err().to_string();
    assert!(err.contains("kind"), "{err}");
}

#[test]
fn intensity_window_pins() {
    let v = vol(
        [1, 1, 5],
        [1.0; 3],
        VolumeKind::Intensity,
        vec![-175.0, 275.0, 50.0, -1000.0, 5000.0],
    );
    let w = v.intensity_window(-175.0, 275.0).unwrap();
    assert_eq!(w.data, vec![0.0, 1.0, 0.5, 0.0, 1.0]);
    assert!(v.intensity_window(10.0, 10.0).is_err());
    assert!(v.intensity_window(10.0, -10.0).is_err());
}

#[test]
fn resample_identity_and_factor_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let v = vol([4, 4, 4], [2.0; 3], VolumeKind::Intensity, data);

    let same = v.resample([2.0; 3]).unwrap();
    assert_eq!(same.extents, v.extents);
    assert_eq!(same.data, v.data);

    let fine = v.resample([1.0; 3]).unwrap();
    assert_eq!(fine.extents, [8, 8, 8]);
    // Trilinear output is a convex combination: bounds cannot grow.
    let (lo, hi) = v.data.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
    assert!(fine.data.iter().all(|&x| x >= lo && x <= hi));

    // Anisotropic target changes extents per axis.
    let aniso = v.resample([2.0, 1.0, 4.0]).unwrap();
    assert_eq!(aniso.extents, [4, 8, 2]);
    assert!(v.resample([0.0, 1.0, 1.0]).is_err());
}

#[test]
fn resample_labels_nearest_neighbor() {
    let data: Vec<f64> = (0..27).map(|i| (i % 3) as f64).collect();
    let v = vol([3, 3, 3], [1.0; 3], VolumeKind::Label, data);
    let up = v.resample([0.6; 3]).unwrap();
    assert_eq!(up.extents, [5, 5, 5]);
    assert!(up.data.iter().all(|&x| x == 0.0 || x == 1.0 || x == 2.0));
    assert!(up.data.iter().all(|&x| x.fract() == 0.0));
}

#[test]
fn augment_is_seed_deterministic_and_keeps_correspondence() {
    let n = 4 * 4 * 4;
    let image = vol([4, 4, 4], [1.0; 3], VolumeKind::Intensity, ramp(n));
    let label = vol([4, 4, 4], [1.0; 3], VolumeKind::Label, ramp(n));

    let mut saw_spatial = false;
    let mut saw_intensity = false;
    for seed in 0..200 {
        let (a1, l1) = augment(&image, &label, seed).unwrap();
        let (a2, l2) = augment(&image, &label, seed).unwrap();
        assert_eq!(a1.data, a2.data, "seed {seed} must reproduce bitwise");
        assert_eq!(l1.data, l2.data);

        // Labels stay integral and spatial-only: the label multiset is
        // exactly the input multiset.
        let mut sorted = l1.data.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, ramp(n));

        // Image and label moved identically: the image value at each voxel
        // is an affine function of the label value there (slope > 0).
        let (x0, y0) = (l1.data[0], a1.data[0]);
        let pair = l1.data.iter().zip(&a1.data).find(|(x, _)| **x != x0).unwrap();
        let slope = (pair.1 - y0) / (pair.0 - x0);
        let inter = y0 - slope * x0;
        assert!(slope > 0.0);
        for (x, y) in l1.data.iter().zip(&a1.data) {
            assert!((x * slope + inter - y).abs() < 1e-9);
        }
        if l1.data != label.data {
            saw_spatial = true;
        }
        if slope != 1.0 || inter != 0.0 {
            saw_intensity = true;
            assert!((0.9..1.1).contains(&slope), "{slope}");
            assert!((-0.1..0.1).contains(&inter), "{inter}");
        }
    }
    assert!(saw_spatial && saw_intensity, "200 seeds must trigger both transform kinds");

    // Most seeds are identity: every transform has probability 0.1.
    let identity = (0..200)
        .filter(|&s| augment(&image, &label, s).unwrap().0.data == image.data)
        .count();
    assert!(identity > 100, "got {identity} identity seeds of 200");
}

#[test]
fn flips_and_rotations_are_exact_involutions() {
    let v = vol([2, 3, 4], [1.0, 2.0, 3.0], VolumeKind::Intensity, ramp(24));
    for axis in 0..3 {
        assert_eq!(v.flipped(axis).flipped(axis).data, v.data);
        assert_ne!(v.flipped(axis).data, v.data);
    }
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let once = v.rotated90(a, b);
        let four = once.rotated90(a, b).rotated90(a, b).rotated90(a, b);
        assert_eq!(four.extents, v.extents);
        assert_eq!(four.spacing, v.spacing);
        assert_eq!(four.data, v.data);
        let mut sorted = once.data.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, ramp(24), "rotation permutes, never resamples");
    }
}

#[test]
fn augment_rejects_extent_mismatch() {
    let image = vol([4, 4, 4], [1.0; 3], VolumeKind::Intensity, ramp(64));
    let label = vol([4, 4, 2], [1.0; 3], VolumeKind::Label, ramp(32));
    assert!(augment(&image, &label, 0).is_err());
}

#[test]
fn foreground_crop_biases_toward_foreground() {
    // One foreground voxel tucked in a corner of a 12^3 volume.
    let e = [12usize; 3];
    let n: usize = e.iter().product();
    let mut lab = vec![0.0; n];
    lab[(10 * 12 + 10) * 12 + 10] = 1.0;
    let image = vol(e, [1.0; 3], VolumeKind::Intensity, ramp(n));
    let label = vol(e, [1.0; 3], VolumeKind::Label, lab);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hits = 0;
    for _ in 0..200 {
        let (ci, cl) = foreground_crop(&image, &label, [4; 3], &mut rng).unwrap();
        assert_eq!(ci.extents, [4, 4, 4]);
        assert_eq!(cl.extents, [4, 4, 4]);
        if cl.data.iter().any(|&x| x > 0.0) {
            hits += 1;
        }
    }
    // Foreground-centered crops (p = 0.5) always contain the voxel; uniform
    // crops contain it with probability (3/9)^3 ≈ 4%.
    assert!((80..=140).contains(&hits), "got {hits} foreground hits of 200");

    assert!(foreground_crop(&image, &label, [13, 4, 4], &mut rng).is_err());
}
