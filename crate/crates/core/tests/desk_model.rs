mod common;

use xexplain::backend::{read_parity_file, ModelManifest, CONV_FEATURES};
use xexplain::index::DEFAULT_POOL;
use xexplain::latent_match::DEFAULT_CONV_CACHE;
use xexplain::superpixels::DEFAULT_SEGMENTS;
use xexplain::*;

use common::*;

#[test]
fn parity_rows_match_reference_logits() {
    let bundle = desk();
    let parity = read_parity_file(fixtures().join("desk/parity.bin")).unwrap();
    assert_eq!(parity.n_classes, bundle.n_classes());
    assert_eq!(parity.rows.len(), 10);
    let (c, h, w) = bundle.input_shape();
    assert_eq!(parity.input_len, c * h * w);
    for (input, logits) in &parity.rows {
        let img = ImageTensor::new(input.clone(), c, h, w, "parity").unwrap();
        let pred = bundle.forward(&img).unwrap();
        for (a, b) in pred.logits.iter().zip(logits) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}

#[test]
fn latent_is_spatial_mean_of_conv_features() {
    let bundle = desk();
    let img = bundle.load_image(&test_split()[0].image_path).unwrap();
    let pred = bundle.forward(&img).unwrap();
    let conv = pred.conv_features.as_ref().unwrap();
    let (h, w) = conv.spatial_shape();
    for k in 0..conv.depth() {
        let mut sum = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                sum += conv.get(i, j, k) as f64;
            }
        }
        let mean = sum / (h * w) as f64;
        assert!((mean - pred.latent.as_slice()[k] as f64).abs() < 1e-4);
    }
    // logits = latent W + b
    let head = bundle.linear_head(pred.latent.as_slice());
    for (a, b) in head.iter().zip(&pred.logits) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn toy_linear_model_is_identity() {
    let bundle = toy();
    assert!(!bundle.is_convolutional());
    let img = ImageTensor::new(vec![3.0, 4.0], 1, 1, 2, "toy").unwrap();
    let pred = bundle.forward(&img).unwrap();
    assert_eq!(pred.logits, vec![3.0, 4.0]);
    assert_eq!(pred.latent.as_slice(), &[3.0, 4.0]);
    assert_eq!(pred.predicted_class, 1);
    assert!(pred.conv_features.is_none());
    assert_eq!(bundle.class_names(), &["a".to_string(), "b".to_string()]);
}

#[test]
fn missing_named_output_is_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = ModelManifest::from_path(fixtures().join("toy/manifest.json")).unwrap();
    manifest.convolutional = true;
    let path = dir.path().join("manifest.json");
    std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let err = load_model(fixtures().join("toy/linear.onnx"), &path).unwrap_err();
    match err.root() {
        Error::Contract(msg) => assert!(msg.contains(CONV_FEATURES), "{msg}"),
        other => panic!("expected contract error, got {other}"),
    }
}

#[test]
fn latent_explanation_rejects_non_convolutional_model() {
    let bundle = toy();
    let img = ImageTensor::new(vec![1.0, 0.0], 1, 1, 2, "toy").unwrap();
    let index = LatentIndex::new(2, vec![1.0, 0.0], vec![RecordMeta {
        image_path: "x.png".into(),
        label: 0,
        split: "train".into(),
    }])
    .unwrap();
    let err = explain_latent(&bundle, &index, &img, &LatentConfig::default(), None).unwrap_err();
    assert!(matches!(err.root(), Error::Contract(_)));
}

#[test]
fn index_rows_equal_forward_latents() {
    let bundle = desk();
    let entries: Vec<RecordMeta> = train().into_iter().take(20).collect();
    let index = build_index(&bundle, &entries, OnUnreadable::Abort).unwrap();
    assert_eq!(index.count(), 20);
    for (k, e) in entries.iter().enumerate() {
        let pred = bundle.forward(&bundle.load_image(&e.image_path).unwrap()).unwrap();
        assert_eq!(index.row(k), pred.latent.as_slice());
        assert_eq!(index.meta(k), e);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.idx");
    index.save(&path).unwrap();
    assert_eq!(LatentIndex::load(&path).unwrap(), index);
}

#[test]
fn unreadable_entries_abort_or_skip() {
    let bundle = desk();
    let mut entries: Vec<RecordMeta> = train().into_iter().take(3).collect();
    entries.insert(1, RecordMeta {
        image_path: "/nonexistent/image.png".into(),
        label: 0,
        split: "train".into(),
    });
    assert!(build_index(&bundle, &entries, OnUnreadable::Abort).is_err());
    let index = build_index(&bundle, &entries, OnUnreadable::Skip).unwrap();
    assert_eq!(index.count(), 3);
    assert_eq!(index.meta(1), &entries[2]);
}

#[test]
fn logit_saliency_matches_occlusion_oracle() {
    let bundle = desk();
    let img = bundle.load_image(&test_split()[3].image_path).unwrap();
    let seg = slic(&img, SlicParams::with_segments(DEFAULT_SEGMENTS)).unwrap();
    let class = bundle.forward(&img).unwrap().predicted_class;
    let sal = superpixel_logit_saliency(&bundle, &img, &seg, class).unwrap();
    assert_eq!(sal.scores.len(), seg.n_segments());
    for s in 0..seg.n_segments() {
        // keep only segment s, zero everything else in normalized space
        let mut px = img.pixels().to_vec();
        for (p, l) in px.iter_mut().zip(seg.labels()) {
            if *l as usize != s {
                *p = 0.0;
            }
        }
        let (c, h, w) = img.shape();
        let masked = ImageTensor::new(px, c, h, w, "").unwrap();
        assert_eq!(sal.scores[s], bundle.forward(&masked).unwrap().logit(class));
    }
}

#[test]
fn segment_features_match_crop_oracle() {
    let bundle = desk();
    let img = bundle.load_image(&test_split()[5].image_path).unwrap();
    let seg = slic(&img, SlicParams::with_segments(9)).unwrap();
    let feats = featurize_segments(&bundle, &img, &seg).unwrap();
    let class = bundle.forward(&img).unwrap().predicted_class;
    let logit = superpixel_logit_saliency(&bundle, &img, &seg, class).unwrap();
    for f in &feats {
        let crop = crop_upsample_region(&img, &seg, f.label, bundle.input_size(), 0.0).unwrap();
        let pred = bundle.forward(&crop.image).unwrap();
        assert_eq!(f.latent, pred.latent.as_slice());
        assert_eq!(f.saliency, logit.scores[f.label]);
        assert_eq!(f.bbox, seg.bounding_box(f.label).unwrap());
        assert_eq!(f.area, seg.sizes()[f.label]);
    }
}

fn index_with(bundle: &ModelBundle, test: &RecordMeta, n_train: usize) -> LatentIndex {
    let mut entries: Vec<RecordMeta> = train().into_iter().take(n_train).collect();
    entries.push(test.clone());
    build_index(bundle, &entries, OnUnreadable::Abort).unwrap()
}

#[test]
fn latent_explanation_composes_and_finds_itself() {
    let bundle = desk();
    let test = test_split()[0].clone();
    let index = index_with(&bundle, &test, 60);
    let self_row = index.count() - 1;
    let img = bundle.load_image(&test.image_path).unwrap();
    let cache = ConvCache::new(DEFAULT_CONV_CACHE);
    let config = LatentConfig::default();
    let record = explain_latent(&bundle, &index, &img, &config, Some(&cache)).unwrap();

    let f = &record.features[0];
    assert_eq!(f.rank, 1);
    assert_eq!(f.neighbor_row, self_row);
    assert_eq!(f.neighbor_pool_rank, 0);
    assert_eq!(f.distance, 0.0);
    assert_eq!(f.neighbor_region, MatchedRegion::Cell(f.test_cell.unwrap()));
    assert_eq!(f.neighbor_box, f.test_box);

    // composition: test region, pool and constrained search done by hand
    let pred = bundle.forward(&img).unwrap();
    let map = cam(pred.conv_features.as_ref().unwrap(), bundle.weights(), pred.predicted_class).unwrap();
    let conv = pred.conv_features.as_ref().unwrap();
    let regions = select_test_region(conv, &map, config.k_features, config.nms_radius).unwrap();
    let pool = index.query(pred.latent.as_slice(), config.pool).unwrap();
    let preds: Vec<Prediction> = pool
        .entries
        .iter()
        .map(|n| bundle.forward(&bundle.load_image(&n.image_path).unwrap()).unwrap())
        .collect();
    let maps: Vec<_> = preds
        .iter()
        .map(|p| cam(p.conv_features.as_ref().unwrap(), bundle.weights(), p.predicted_class).unwrap())
        .collect();
    let cands: Vec<_> = preds.iter().zip(&maps).map(|(p, m)| (p.conv_features.as_ref().unwrap(), m)).collect();
    assert_eq!(record.features.len(), regions.regions.len());
    for (f, r) in record.features.iter().zip(&regions.regions) {
        let m = constrained_cell_argmin(&r.omega, &cands, config.alpha).unwrap();
        assert_eq!(f.test_cell, Some(r.cell));
        assert_eq!(f.neighbor_row, pool.entries[m.neighbor].row_id);
        assert_eq!(f.neighbor_region, MatchedRegion::Cell(m.cell));
        assert_eq!(f.distance, m.distance);
    }

    // rerun is identical apart from timings, cached or not
    let again = explain_latent(&bundle, &index, &img, &config, None).unwrap();
    assert_eq!(again.without_timings(), record.without_timings());
    assert!(record.timings.0.contains_key("matching"));
}

#[test]
fn superpixel_explanation_finds_itself() {
    let bundle = desk();
    let test = test_split()[0].clone();
    let index = index_with(&bundle, &test, 20);
    let self_row = index.count() - 1;
    let img = bundle.load_image(&test.image_path).unwrap();
    let config = SuperpixelConfig {
        pool: 5,
        ..SuperpixelConfig::default()
    };
    let record = explain_superpixel(&bundle, &index, &img, &config, None).unwrap();
    let f = &record.features[0];
    assert_eq!(f.rank, 1);
    assert_eq!(f.neighbor_row, self_row);
    assert_eq!(f.distance, 0.0);
    assert_eq!(f.neighbor_region, MatchedRegion::Segment(f.test_segment.unwrap()));
    assert_eq!(f.neighbor_box, f.test_box);

    let again = explain_superpixel(&bundle, &index, &img, &config, None).unwrap();
    assert_eq!(again.without_timings(), record.without_timings());
}

#[test]
fn superpixel_cache_gives_same_record() {
    let bundle = desk();
    let test = test_split()[1].clone();
    let index = index_with(&bundle, &test, 10);
    let img = bundle.load_image(&test.image_path).unwrap();
    let config = SuperpixelConfig {
        pool: 3,
        test_saliency: TestSaliency::Logit,
        ..SuperpixelConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let cache = SegmentCache::new(dir.path()).unwrap();
    let cold = explain_superpixel(&bundle, &index, &img, &config, Some(&cache)).unwrap();
    assert!(std::fs::read_dir(dir.path()).unwrap().count() >= 3);
    let warm = explain_superpixel(&bundle, &index, &img, &config, Some(&cache)).unwrap();
    assert_eq!(cold.without_timings(), warm.without_timings());
    assert_eq!(DEFAULT_POOL, 50);
}

#[test]
fn rendered_boxes_sit_on_recorded_coordinates() {
    let bundle = desk();
    let test = test_split()[2].clone();
    let index = index_with(&bundle, &test, 30);
    let img = bundle.load_image(&test.image_path).unwrap();
    let record = explain_latent(&bundle, &index, &img, &LatentConfig::default(), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = render_explanation(&bundle, &record, dir.path(), "t").unwrap();
    let overlay = image::open(&files.overlay).unwrap().to_rgb8();
    let (h, w) = bundle.input_size();
    assert_eq!(overlay.dimensions(), (w as u32, h as u32));
    let last = record.features.last().unwrap();
    let color = render::rank_color(last.rank);
    let b = last.test_box;
    for (y, x) in [(b.top, b.left), (b.bottom - 1, b.right - 1), (b.top, b.right - 1)] {
        assert_eq!(*overlay.get_pixel(x as u32, y as u32), color);
    }
    assert_eq!(files.neighbors.len(), record.features.len());
    let composite = image::open(&files.composite).unwrap();
    let tiles = 1 + record.features.len() as u32;
    assert_eq!(composite.width(), tiles * w as u32 + (tiles - 1) * 2);
}

#[test]
fn masked_dataset_fraction_matches_mask() {
    let bundle = desk();
    let entries: Vec<RecordMeta> = train().into_iter().take(6).collect();
    let index = build_index(&bundle, &entries, OnUnreadable::Abort).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let threshold = RelativeThreshold::Finite(2.0);
    let method = MaskMethod::Latent(MapKind::Cam);
    let out = generate_masked_dataset(&bundle, &index, method, threshold, dir.path(), 0).unwrap();
    assert_eq!(out.len(), 6);
    for (row, e) in out.iter().enumerate() {
        let img = bundle.load_image(&e.image_path).unwrap();
        let mask = ablation::admitted_mask(&bundle, &img, method, threshold, 0).unwrap();
        let frac = mask.iter().filter(|m| **m).count() as f64 / mask.len() as f64;
        assert_eq!(e.occluded_fraction, frac);
        assert!(e.occluded_fraction > 0.0);
        assert_eq!(e.label, entries[row].label);
        let masked = image::open(&e.masked_path).unwrap();
        let (h, w) = bundle.input_size();
        assert_eq!((masked.height() as usize, masked.width() as usize), (h, w));
    }
    let full = generate_masked_dataset(&bundle, &index, MaskMethod::Full, threshold, dir.path().join("full"), 0).unwrap();
    assert!(full.iter().all(|e| e.occluded_fraction == 1.0));
    let listed: Vec<MaskedEntry> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(ablation::MASKED_MANIFEST)).unwrap()).unwrap();
    assert_eq!(listed, out);
}

#[test]
fn ablation_records_cover_every_method() {
    let bundle = desk();
    let config = AblationConfig {
        methods: vec![AblationMethod::Cam, AblationMethod::Random, AblationMethod::SuperpixelLogit],
        segment_counts: vec![9],
        mode: AblationMode::Include,
        n_images: 4,
        seed: 1,
        lime: LimeConfig::default(),
    };
    let res = run_ablation(&bundle, &test_split(), &config).unwrap();
    assert!(res.failures.is_empty());
    assert_eq!(res.records.len(), 12);
    assert_eq!(res.logits(AblationMethod::Cam, 9).len(), 4);
    assert_eq!(res.to_csv().lines().count(), 13);
    let again = run_ablation(&bundle, &test_split(), &config).unwrap();
    assert_eq!(again.to_csv(), res.to_csv());
}
