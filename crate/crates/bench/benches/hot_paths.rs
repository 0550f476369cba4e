use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use sama::backbone::{Backbone, BackboneConfig, Point};
use sama::image::{GrayImage, Mask};
use sama::plm::{Plm, PlmConfig, Segmenter};
use sama::pmm::extract_contour;
use sama::{Tape, Tensor};

fn image(size: usize) -> GrayImage {
    GrayImage::new(size, size, (0..size * size).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let a = Tensor::full(&[64, 64], 0.5);
    let b = Tensor::full(&[64, 256], 0.25);
    c.bench_function("matmul_64x64x256", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            black_box(t.matmul(x, y).unwrap());
        })
    });
}

fn segmenter(c: &mut Criterion) {
    let cfg = BackboneConfig::default();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let plm = Plm::new(PlmConfig::for_channels(cfg.channels)).unwrap();
    let mut params = bb.init(0);
    params.extend(plm.init(1));
    let seg = Segmenter::with_plm(bb, plm, params);
    let img = image(cfg.image_size);
    c.bench_function("image_features", |bench| bench.iter(|| black_box(seg.image_features(&img).unwrap())));
    let feats = seg.image_features(&img).unwrap();
    let pts = [Point::new(20.5, 31.5)];
    c.bench_function("adapted_decode", |bench| bench.iter(|| black_box(seg.predict_with_features(&feats, &pts).unwrap())));
}

fn contour(c: &mut Criterion) {
    let m = Mask::from_fn(64, 64, |x, y| {
        let (dx, dy) = (x as f32 - 30.0, y as f32 - 34.0);
        dx * dx + dy * dy <= 400.0
    });
    c.bench_function("extract_contour_k32", |bench| bench.iter(|| black_box(extract_contour(&m, 32).unwrap())));
}

criterion_group!(benches, matmul, segmenter, contour);
criterion_main!(benches);
