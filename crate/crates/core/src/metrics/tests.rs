use super::*;

fn rec(person: PersonId, camera: CameraId, split: Split, v: &[f64]) -> EmbeddingRecord {
    EmbeddingRecord::new(person, camera, split, v.to_vec())
}

fn q(person: PersonId, camera: CameraId, v: &[f64]) -> EmbeddingRecord {
    rec(person, camera, Split::Query, v)
}

fn g(person: PersonId, camera: CameraId, v: &[f64]) -> EmbeddingRecord {
    rec(person, camera, Split::Gallery, v)
}

const OPEN: RetrievalProtocol = RetrievalProtocol {
    distance: Distance::Euclidean,
    cross_camera_only: false,
};

#[test]
fn singleton_gallery() {
    let ranked = rank_gallery(&q(1, 0, &[0.0]), &[g(2, 1, &[5.0])], &OPEN).unwrap();
    assert_eq!(ranked, vec![0]);
}

#[test]
fn ranking_by_distance() {
    let gallery = [g(1, 1, &[1.0, 0.0]), g(2, 1, &[3.0, 0.0]), g(3, 1, &[2.0, 0.0])];
    let ranked = rank_gallery(&q(1, 0, &[0.0, 0.0]), &gallery, &OPEN).unwrap();
    // 1-based gallery items 1, 3, 2
    assert_eq!(ranked, vec![0, 2, 1]);
}

#[test]
fn ties_keep_input_order() {
    let gallery = [g(1, 1, &[1.0]), g(2, 1, &[-1.0]), g(3, 1, &[1.0])];
    assert_eq!(rank_gallery(&q(9, 0, &[0.0]), &gallery, &OPEN).unwrap(), vec![0, 1, 2]);
}

#[test]
fn cosine_ranking() {
    let proto = RetrievalProtocol {
        distance: Distance::Cosine,
        cross_camera_only: false,
    };
    let gallery = [g(1, 1, &[0.0, 5.0]), g(2, 1, &[10.0, 0.1]), g(3, 1, &[0.0, 0.0])];
    assert_eq!(rank_gallery(&q(9, 0, &[1.0, 0.0]), &gallery, &proto).unwrap(), vec![1, 0, 2]);
}

#[test]
fn junk_items_are_removed() {
    let gallery = [g(1, 0, &[0.1]), g(1, 1, &[0.2]), g(2, 0, &[0.3])];
    let ranked = rank_gallery(&q(1, 0, &[0.0]), &gallery, &RetrievalProtocol::default()).unwrap();
    assert_eq!(ranked, vec![1, 2]);
}

#[test]
fn rank_errors() {
    assert!(rank_gallery(&q(1, 0, &[0.0]), &[], &OPEN).is_err());
    assert!(rank_gallery(&q(1, 0, &[0.0]), &[g(1, 1, &[0.0, 1.0])], &OPEN).is_err());
}

#[test]
fn ap_examples() {
    assert_eq!(average_precision(&[true]).unwrap(), 1.0);
    let ap = average_precision(&[true, false, true, false, false]).unwrap();
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    let ap = average_precision(&[false, false, false, true, true]).unwrap();
    assert!((ap - 0.325).abs() < 1e-15);
    assert!(matches!(average_precision(&[false, false]), Err(Error::NoPositives)));
}

#[test]
fn mean_ap_and_cmc_by_hand() {
    // query 1: positive first (AP 1). query 2: positives at ranks 2 and 4 → (1/2 + 2/4)/2 = 0.5
    let g2 = [
        g(1, 1, &[0.1]),
        g(2, 1, &[10.2]),
        g(3, 1, &[10.1]),
        g(4, 1, &[10.3]),
        g(2, 1, &[10.4]),
    ];
    let queries = [q(1, 0, &[0.0]), q(2, 0, &[10.0])];
    let eval = evaluate(&queries, &g2, &OPEN, Exec::Sequential).unwrap();
    assert_eq!(eval.outcomes[0].ap, Some(1.0));
    assert_eq!(eval.outcomes[1].ap, Some(0.5));
    assert_eq!(eval.mean_ap().unwrap(), 0.75);
    assert_eq!(eval.cmc(1).unwrap(), 0.5);
    assert_eq!(eval.cmc(2).unwrap(), 1.0);
    assert!(eval.cmc(0).is_err());
    let mut last = 0.0;
    for k in 1..=5 {
        let v = eval.cmc(k).unwrap();
        assert!(v >= last);
        last = v;
    }
}

#[test]
fn perfect_retrieval() {
    let gallery = [g(1, 1, &[0.0]), g(2, 1, &[10.0])];
    let queries = [q(1, 0, &[0.1]), q(2, 0, &[10.1])];
    let p = RetrievalProtocol::default();
    assert_eq!(mean_ap(&queries, &gallery, &p).unwrap(), 1.0);
    assert_eq!(cmc_rank_k(&queries, &gallery, &p, 1).unwrap(), 1.0);
}

#[test]
fn zero_positive_queries_are_excluded() {
    let gallery = [g(1, 1, &[0.0]), g(2, 0, &[1.0])];
    // person 2's only gallery image shares its camera: junk
    let queries = [q(1, 0, &[0.0]), q(2, 0, &[1.0]), q(3, 2, &[1.0])];
    let eval = evaluate(&queries, &gallery, &RetrievalProtocol::default(), Exec::Sequential).unwrap();
    assert_eq!(eval.mean_ap().unwrap(), 1.0);
    let d = eval.diagnostics();
    assert_eq!(d.excluded_queries, 2);
    assert_eq!(d.cameras_without_queries, vec![2]);
    assert_eq!(d.cameras_without_gallery_queries, vec![0, 2]);

    let none = evaluate(&queries[1..], &gallery, &RetrievalProtocol::default(), Exec::Sequential).unwrap();
    assert!(none.mean_ap().is_err());
    assert!(none.cmc(1).is_err());
}

#[test]
fn query_map_groups_by_camera() {
    let queries = [q(1, 0, &[0.0])];
    let gallery = [g(1, 1, &[0.0]), g(2, 2, &[1.0])];
    let eval = evaluate(&queries, &gallery, &OPEN, Exec::Sequential).unwrap();
    let qm = eval.query_map_per_camera();
    assert_eq!(qm.len(), 1);
    assert_eq!(qm[&0].value, eval.mean_ap().unwrap());
}

#[test]
fn query_map_groupwise_means() {
    // camera 1: one query AP 1.0. camera 2: AP 0.5 (positive at rank 2) and
    // AP 2/3·... built directly from outcomes instead
    let eval = Evaluation {
        outcomes: vec![
            QueryOutcome { camera: 1, ap: Some(1.0), first_hit: Some(1), gallery_ap: vec![] },
            QueryOutcome { camera: 2, ap: Some(0.5), first_hit: Some(2), gallery_ap: vec![] },
            QueryOutcome { camera: 2, ap: Some(0.7), first_hit: Some(1), gallery_ap: vec![] },
        ],
        cameras: [1, 2].into_iter().collect(),
    };
    let qm = eval.query_map_per_camera();
    assert_eq!(qm[&1].value, 1.0);
    assert!((qm[&2].value - 0.6).abs() < 1e-15);
    assert_eq!(qm[&2].num_queries, 2);
}

#[test]
fn gallery_map_removes_other_camera_positives() {
    // ranked: cam-A positive, cam-B positive, negative
    let gallery = [g(1, 10, &[1.0]), g(1, 20, &[2.0]), g(2, 10, &[3.0])];
    let queries = [q(1, 0, &[0.0])];
    let eval = evaluate(&queries, &gallery, &RetrievalProtocol::default(), Exec::Sequential).unwrap();
    let gm = eval.gallery_map_per_camera();
    assert_eq!(gm[&10].value, 1.0);
    assert_eq!(gm[&20].value, 1.0);
    assert_eq!(eval.outcomes[0].ap, Some(1.0));

    // negative between the two positives: B's positive moves from rank 3 to rank 2
    let gallery = [g(1, 10, &[1.0]), g(2, 10, &[2.0]), g(1, 20, &[3.0])];
    let eval = evaluate(&queries, &gallery, &RetrievalProtocol::default(), Exec::Sequential).unwrap();
    let gm = eval.gallery_map_per_camera();
    assert_eq!(gm[&10].value, 1.0);
    assert_eq!(gm[&20].value, 0.5);
    assert!((eval.outcomes[0].ap.unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
}

#[test]
fn gallery_map_single_camera_equals_global() {
    let gallery = [g(1, 3, &[1.0]), g(2, 3, &[0.5]), g(2, 1, &[0.7]), g(1, 3, &[4.0])];
    let queries = [q(1, 0, &[0.0]), q(2, 0, &[0.6])];
    // every positive of both queries... person 2 has positives on cameras 3 and 1,
    // so restrict to person 1 queries
    let eval = evaluate(&queries[..1], &gallery, &RetrievalProtocol::default(), Exec::Sequential).unwrap();
    let gm = eval.gallery_map_per_camera();
    assert_eq!(gm.keys().copied().collect::<Vec<_>>(), vec![3]);
    assert_eq!(gm[&3].value, eval.mean_ap().unwrap());
}

#[test]
fn parallel_and_sequential_agree() {
    let mut gallery = Vec::new();
    let mut queries = Vec::new();
    for i in 0..40u32 {
        let x = (i as f64 * 0.37).sin();
        gallery.push(g(i % 7, i % 3, &[x, x * x]));
        if i % 4 == 0 {
            queries.push(q(i % 7, (i + 1) % 3, &[x + 0.01, x]));
        }
    }
    let p = RetrievalProtocol::default();
    let a = evaluate(&queries, &gallery, &p, Exec::Sequential).unwrap();
    let b = evaluate(&queries, &gallery, &p, Exec::Parallel).unwrap();
    assert_eq!(a.outcomes, b.outcomes);
}
