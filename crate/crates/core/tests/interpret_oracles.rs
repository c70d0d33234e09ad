//! Coverage and localization against direct counting.

mod common;

use common::*;
use eegraph_core::ingest::AnnotationMask;
use eegraph_core::interpret::{coverage, localization, summarize, OcclusionMap};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_pair(rng: &mut ChaCha8Rng) -> (OcclusionMap, AnnotationMask) {
    let n = rng.random_range(1..=8);
    let t = rng.random_range(1..=12);
    // a coarse raw grid makes cells land exactly on 0.5 now and then
    let raw = (0..n * t).map(|_| rng.random_range(0..9) as f64).collect();
    let map = OcclusionMap::from_raw(n, t, raw).unwrap();
    let p = rng.random_range(0.05..0.9);
    let mut grid: Vec<u8> = (0..n * t).map(|_| u8::from(rng.random_bool(p))).collect();
    if grid.iter().all(|&g| g == 0) {
        grid[rng.random_range(0..n * t)] = 1;
    }
    (map, AnnotationMask { n_channels: n, n_seconds: t, grid })
}

/// `(hits, annotated, salient)` by a double loop over channels and seconds.
fn count(map: &OcclusionMap, annot: &AnnotationMask) -> (usize, usize, usize) {
    let (mut hits, mut annotated, mut salient) = (0, 0, 0);
    for ch in 0..map.n_channels {
        for s in 0..map.n_steps {
            let on = map.get(ch, s) > 0.5;
            let a = annot.get(ch, s) == 1;
            hits += usize::from(on && a);
            annotated += usize::from(a);
            salient += usize::from(on);
        }
    }
    (hits, annotated, salient)
}

#[test]
fn scores_match_brute_force_counts() {
    let mut rng = rng(61);
    let mut on_boundary = 0;
    for _ in 0..1000 {
        let (map, annot) = random_pair(&mut rng);
        on_boundary += map.values.iter().filter(|&&v| v == 0.5).count();
        let (hits, annotated, salient) = count(&map, &annot);
        assert_eq!(coverage(&map, &annot).unwrap(), hits as f64 / annotated as f64);
        let loc = localization(&map, &annot).unwrap();
        if salient == 0 {
            assert!(loc.degenerate);
            assert_eq!(loc.value, 0.0);
        } else {
            assert!(!loc.degenerate);
            assert_eq!(loc.value, hits as f64 / salient as f64);
        }
    }
    assert!(on_boundary > 0, "no cell tested the strict threshold");
}

#[test]
fn edge_cases() {
    let mut rng = rng(62);
    for _ in 0..200 {
        let (map, mut annot) = random_pair(&mut rng);
        annot.grid.fill(1);
        let above = map.values.iter().filter(|&&v| v > 0.5).count();
        assert_eq!(coverage(&map, &annot).unwrap(), above as f64 / map.values.len() as f64);
        if above > 0 {
            assert_eq!(localization(&map, &annot).unwrap().value, 1.0);
        }
    }

    let flat = OcclusionMap::from_raw(3, 4, vec![2.5; 12]).unwrap();
    assert!(flat.degenerate);
    let annot = AnnotationMask { n_channels: 3, n_seconds: 4, grid: vec![1; 12] };
    assert_eq!(coverage(&flat, &annot).unwrap(), 0.0);
    let loc = localization(&flat, &annot).unwrap();
    assert_eq!((loc.value, loc.degenerate), (0.0, true));

    let empty = AnnotationMask { n_channels: 3, n_seconds: 4, grid: vec![0; 12] };
    assert!(coverage(&flat, &empty).is_err());
    let wrong = AnnotationMask { n_channels: 4, n_seconds: 3, grid: vec![1; 12] };
    assert!(coverage(&flat, &wrong).is_err());
}

#[test]
fn hand_counted_cases() {
    // salient cells: channel 0 seconds 0-1 and channel 1 seconds 0-1
    let raw = vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
    let map = OcclusionMap::from_raw(2, 3, raw).unwrap();
    let exact = AnnotationMask { n_channels: 2, n_seconds: 3, grid: vec![1, 1, 0, 1, 1, 0] };
    assert_eq!(localization(&map, &exact).unwrap().value, 1.0);
    assert_eq!(coverage(&map, &exact).unwrap(), 1.0);
    let half = AnnotationMask { n_channels: 2, n_seconds: 3, grid: vec![1, 1, 0, 0, 0, 0] };
    assert_eq!(localization(&map, &half).unwrap().value, 0.5);
    assert_eq!(coverage(&map, &half).unwrap(), 1.0);
}

#[test]
fn summary_skips_unannotated_clips() {
    let map = OcclusionMap::from_raw(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    let hit = AnnotationMask { n_channels: 2, n_seconds: 2, grid: vec![0, 1, 0, 0] };
    let miss = AnnotationMask { n_channels: 2, n_seconds: 2, grid: vec![1, 0, 0, 0] };
    let none = AnnotationMask { n_channels: 2, n_seconds: 2, grid: vec![0; 4] };
    let s = summarize(&[(&map, &hit), (&map, &miss), (&map, &none)], 10).unwrap();
    assert_eq!(s.localization.n, 2);
    assert_eq!(s.localization.histogram[9], 1);
    assert_eq!(s.localization.histogram[0], 1);
    assert_eq!(s.localization.fraction_above_0_8, 0.5);
    assert_eq!(s.coverage.median, 0.5);
}
