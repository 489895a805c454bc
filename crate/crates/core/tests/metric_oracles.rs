mod common;

use common::oracle;
use sketchfeat::metrics::{acc_at_k, map_at_k, miou_pacc, pck_at_k, precision_at_k, RankedRetrieval};
use sketchfeat::{Keypoint, SegMask};

#[test]
fn fifty_random_instances_match_the_oracles() {
    let t = oracle::compare(2024, 50);
    assert!(t.ap_ok(), "mAP deviates by {}", t.map_max_error);
    assert!(t.count_ok(), "{t:?}");
}

#[test]
fn hand_computed_ap_values() {
    // Relevant at ranks 2 and 4 of 5, two relevant in total.
    let r = RankedRetrieval::new(vec![0, 1, 2, 3, 4], vec![false, true, false, true, false]).unwrap();
    assert!((map_at_k(&[r], 5).unwrap() - 0.5).abs() < 1e-12);
    // Single relevant item in last place of a 200-item gallery.
    let mut rel = vec![false; 200];
    rel[199] = true;
    let r = RankedRetrieval::new((0..200).collect(), rel).unwrap();
    assert!((map_at_k(&[r], 200).unwrap() - 0.005).abs() < 1e-12);
    assert_eq!(oracle::ap_oracle(&[0.0, 1.0, 2.0, 3.0, 4.0], &[false, true, false, true, false], 5), Some(0.5));
}

#[test]
fn hand_computed_counts() {
    let mut rel = vec![false; 12];
    for i in [0, 4, 9] {
        rel[i] = true;
    }
    let r = RankedRetrieval::new((0..12).collect(), rel).unwrap();
    assert!((precision_at_k(&[r], 10).unwrap() - 0.3).abs() < 1e-12);

    let hit_at = |rank: usize| {
        let mut rel = vec![false; 8];
        rel[rank - 1] = true;
        RankedRetrieval::new((0..8).collect(), rel).unwrap()
    };
    assert_eq!(acc_at_k(&[hit_at(6)], 5).unwrap(), 0.0);
    let qs = [hit_at(1), hit_at(3), hit_at(5), hit_at(7)];
    assert_eq!(acc_at_k(&qs, 5).unwrap(), 0.75);
    for k in 1..=8 {
        assert_eq!(acc_at_k(&[hit_at(1)], k).unwrap(), 1.0);
    }

    let gt = [Keypoint::new(100.0, 100.0)];
    assert_eq!(pck_at_k(&[Keypoint::new(125.0, 100.0)], &gt, 5.0, 480).unwrap(), 0.0);
    assert_eq!(pck_at_k(&[Keypoint::new(124.0, 100.0)], &gt, 5.0, 480).unwrap(), 1.0);

    let p = SegMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
    let g = SegMask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
    let (miou, pacc) = miou_pacc(&[p], &[g.clone()]).unwrap();
    assert!((miou - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(pacc, 0.5);
    assert_eq!(miou_pacc(&[g.complement()], &[g.clone()]).unwrap(), (0.0, 0.0));
    assert_eq!(miou_pacc(&[g.clone()], &[g]).unwrap(), (1.0, 1.0));
}

#[test]
fn ties_break_by_gallery_index() {
    // Identical features: every distance ties, so the ranking is the index
    // order and only queries whose match is item 0 hit at rank 1.
    let d = vec![0.0; 4];
    let rankings: Vec<_> = (0..4)
        .map(|target| RankedRetrieval::from_distances(&d, (0..4).map(|i| i == target).collect()).unwrap())
        .collect();
    assert_eq!(acc_at_k(&rankings, 1).unwrap(), 0.25);
}

#[test]
fn perfect_one_hot_features_score_one() {
    let n = 5;
    let rankings: Vec<_> = (0..n)
        .map(|q| {
            let d: Vec<f64> = (0..n).map(|g| if g == q { 0.0 } else { 2f64.sqrt() }).collect();
            RankedRetrieval::from_distances(&d, (0..n).map(|g| g == q).collect()).unwrap()
        })
        .collect();
    assert_eq!(acc_at_k(&rankings, 1).unwrap(), 1.0);
    for k in [1, 3, 5] {
        assert_eq!(map_at_k(&rankings, k).unwrap(), 1.0);
    }
}

#[test]
fn queries_without_relevant_items_are_excluded() {
    let none = RankedRetrieval::new(vec![0, 1], vec![false, false]).unwrap();
    let one = RankedRetrieval::new(vec![0, 1], vec![true, false]).unwrap();
    assert_eq!(map_at_k(&[none.clone(), one], 2).unwrap(), 1.0);
    assert!(map_at_k(&[none], 2).is_err());
}
