use std::fs;
use std::path::{Path, PathBuf};

use nnquine::io::{checkpoint_bytes, csv_row};
use nnquine::{
    accuracy, append_metrics_csv, build_projections, export_heatmap, load_checkpoint, load_mnist, load_mnist_dir,
    save_checkpoint, DenseMatrix, MetricsRecord, NetworkSpec, ParamVector, ProjectedImages, QuineError, Split,
};

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/root/data/mnist"))
}

fn have_mnist() -> bool {
    mnist_dir().join("t10k-images-idx3-ubyte").is_file() && mnist_dir().join("train-images-idx3-ubyte").is_file()
}

fn idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(body);
    b
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn file(&self, name: &str, bytes: &[u8]) -> PathBuf {
        let p = self.dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        p
    }
}

#[test]
fn idx_pixels_are_scaled_to_unit_interval() {
    let fx = Fixture::new();
    let im = fx.file("t10k-images-idx3-ubyte", &idx(2051, &[1, 1, 3], &[0, 51, 255]));
    let lb = fx.file("t10k-labels-idx1-ubyte", &idx(2049, &[1], &[9]));
    let set = load_mnist(&im, &lb).unwrap();
    assert_eq!(set.split, Split::Test);
    assert_eq!((set.rows, set.cols, set.len(), set.pixels()), (1, 3, 1, 3));
    assert_eq!(set.image(0), &[0.0, 0.2, 1.0]);
}

#[test]
fn corrupted_idx_files_are_rejected() {
    let fx = Fixture::new();
    let im = fx.file("im", &idx(2051, &[2, 1, 2], &[1, 2, 3, 4]));
    let lb = fx.file("lb", &idx(2049, &[2], &[0, 1]));
    assert!(load_mnist(&im, &lb).is_ok());

    let swapped = load_mnist(&lb, &im);
    assert!(matches!(swapped, Err(QuineError::Format { .. })), "{swapped:?}");

    let bad_label = fx.file("bad-label", &idx(2049, &[2], &[0, 10]));
    assert!(matches!(load_mnist(&im, &bad_label), Err(QuineError::Format { .. })));

    let short_pixels = fx.file("short-pixels", &idx(2051, &[2, 1, 2], &[1, 2, 3]));
    match load_mnist(&short_pixels, &lb) {
        Err(QuineError::Io { source, .. }) => assert_eq!(source.kind(), std::io::ErrorKind::UnexpectedEof),
        other => panic!("expected an I/O error, got {other:?}"),
    }

    let short_header = fx.file("short-header", &2051u32.to_be_bytes()[..]);
    assert!(matches!(load_mnist(&short_header, &lb), Err(QuineError::Io { .. })));

    let three_labels = fx.file("three", &idx(2049, &[3], &[0, 1, 2]));
    assert!(matches!(load_mnist(&im, &three_labels), Err(QuineError::Consistency(_))));

    let missing = fx.dir.path().join("missing");
    assert!(matches!(load_mnist(&missing, &lb), Err(QuineError::Io { .. })));
}

#[test]
fn official_mnist_counts() {
    if !have_mnist() {
        eprintln!("skipping: no MNIST in {}", mnist_dir().display());
        return;
    }
    let train = load_mnist_dir(mnist_dir(), Split::Train).unwrap();
    let test = load_mnist_dir(mnist_dir(), Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (60_000, 10_000));
    assert_eq!((train.rows, train.cols), (28, 28));
    assert_eq!((train.split, test.split), (Split::Train, Split::Test));
    assert!(train.images.iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn zero_quine_predicts_class_zero_everywhere() {
    if !have_mnist() {
        return;
    }
    let spec = NetworkSpec::auxiliary();
    let proj = build_projections(&spec, 3);
    let test = load_mnist_dir(mnist_dir(), Split::Test).unwrap();
    let zeros = test.labels.iter().filter(|&&l| l == 0).count();
    let set = ProjectedImages::new(&proj, &test.images, &test.labels).unwrap();
    let acc = accuracy(&ParamVector::zeros(&spec), &proj, &spec, &set).unwrap();
    assert_eq!(acc, zeros as f64 / 10_000.0);
}

fn sample_params(spec: &NetworkSpec) -> ParamVector {
    let values = (0..spec.n_params()).map(|i| (i as f64 * 0.37).sin() * 1e-3).collect();
    ParamVector::from_vec(spec, values).unwrap()
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.nnq");
    let spec = NetworkSpec::auxiliary_with(4, 5, 6, 12, 3).with_coord_proj_std(0.25);
    let params = sample_params(&spec);
    save_checkpoint(&path, &spec, 11, 7, &params).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!((ck.spec, ck.seed, ck.epoch), (spec, 11, 7));
    assert_eq!(ck.params, params);
    assert_eq!(fs::metadata(&path).unwrap().len(), 64 + 8 * spec.n_params() as u64);
}

#[test]
fn tampered_checkpoints_are_rejected() {
    let fx = Fixture::new();
    let spec = NetworkSpec::vanilla_with(3, 4);
    let good = checkpoint_bytes(&spec, 1, 2, &sample_params(&spec)).unwrap();

    let mut magic = good.clone();
    magic[0] = b'X';
    let mut version = good.clone();
    version[4] = 9;
    let mut variant = good.clone();
    variant[8] = 7;
    let mut zero_hidden = good.clone();
    zero_hidden[16..20].copy_from_slice(&0u32.to_le_bytes());
    let truncated = good[..good.len() - 3].to_vec();
    let mut extended = good.clone();
    extended.extend_from_slice(&[0; 8]);

    for (name, bytes) in [
        ("magic", magic),
        ("version", version),
        ("variant", variant),
        ("zero-hidden", zero_hidden),
        ("truncated", truncated),
        ("extended", extended),
        ("header-only", good[..20].to_vec()),
    ] {
        let p = fx.file(name, &bytes);
        assert!(matches!(load_checkpoint(&p), Err(QuineError::Format { .. })), "{name} accepted");
    }
}

#[test]
fn spec_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.nnq");
    let spec = NetworkSpec::vanilla_with(3, 4);
    save_checkpoint(&path, &spec, 0, 0, &ParamVector::zeros(&spec)).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert!(ck.expect_spec(&spec).is_ok());
    let other = NetworkSpec::vanilla_with(3, 5);
    assert!(matches!(ck.expect_spec(&other), Err(QuineError::SpecMismatch(_))));
    let rescaled = spec.with_coord_proj_std(1.0);
    assert!(matches!(ck.expect_spec(&rescaled), Err(QuineError::SpecMismatch(_))));
}

#[test]
fn csv_rows_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let mut records = Vec::new();
    for epoch in 0..4u64 {
        let mut r = MetricsRecord::from_loss(epoch, 90.0 / (epoch + 1) as f64, 20_100);
        if epoch == 3 {
            r.accuracy = Some(0.5);
            r.l_task = Some(1.25);
        }
        append_metrics_csv(&path, &r).unwrap();
        records.push(r);
    }
    let mut rdr = csv::Reader::from_path(&path).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["epoch", "l_sr", "margin", "srq", "l_task", "accuracy", "seconds"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for (row, r) in rows.iter().zip(&records) {
        assert_eq!(row[0].parse::<u64>().unwrap(), r.epoch);
        assert_eq!(row[1].parse::<f64>().unwrap(), r.l_sr);
        assert_eq!(row[2].parse::<f64>().unwrap(), r.margin);
        assert_eq!(row[3].parse::<f64>().unwrap(), r.srq);
        assert_eq!(&row[6], "");
    }
    assert_eq!((&rows[0][4], &rows[3][5]), ("", "0.5"));
}

#[test]
fn csv_accepted_column_and_infinite_srq() {
    let mut r = MetricsRecord::from_loss(0, 0.0, 10);
    r.accepted = Some(12);
    let fields: Vec<String> = csv_row(&r).split(',').map(str::to_string).collect();
    assert_eq!(fields.len(), 8);
    assert_eq!(fields[3], "inf");
    assert_eq!(fields[3].parse::<f64>().unwrap(), f64::INFINITY);
    assert_eq!(fields[7], "12");
}

#[test]
fn heatmap_file_has_pgm_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path: &Path = &dir.path().join("w.pgm");
    let m = DenseMatrix::from_vec(2, 3, vec![0.0, 1e-3, -1.0, 2.0, 5.0, -7.5]).unwrap();
    export_heatmap(&m, path).unwrap();
    let bytes = fs::read(path).unwrap();
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    let px = &bytes[11..];
    assert_eq!(px.len(), 6);
    assert_eq!((px[0], *px.iter().max().unwrap()), (0, 255));
    assert_eq!(px[5], 255);
}
