//! Peak heap use of the backward pass, measured by a counting allocator.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use node_adapter::field::{FieldConfig, GradientField, SupportContext};
use node_adapter::gradcheck::random_field;
use node_adapter::ode::{adjoint_from_endpoint, integrate, SolverConfig, SolverMethod};
use node_adapter::tensor::l2_normalize_rows;
use node_adapter::Matrix;

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let ptr = System.alloc(layout);
        if !ptr.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        ptr
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

/// Extra bytes held at the high-water mark of one adjoint pass, or of a
/// forward pass that keeps its trajectory when `store` is set.
fn peak(method: SolverMethod, steps: usize, store: bool) -> usize {
    let (n, d, s) = (4, 8, 6);
    let features = l2_normalize_rows(&Matrix::from_fn(s, d, |r, c| ((r * 5 + c * 3) % 7) as f64 - 3.0 + 0.25)).unwrap();
    let labels: Vec<usize> = (0..s).map(|i| i % n).collect();
    let support = SupportContext::new(features, &labels, n).unwrap();
    let params = random_field(FieldConfig::new(d, 16), 3).unwrap();
    let field = GradientField::new(&params, &support).unwrap();
    let p0 = Matrix::from_fn(n, d, |r, c| 0.1 * (r as f64) - 0.05 * (c as f64));
    let cfg = SolverConfig::new(method, steps, 0.0, 1.0).unwrap();
    let end = integrate(|p, t| field.evaluate(p, t), &p0, &cfg, false).unwrap().end;
    let seed = Matrix::filled(n, d, 1.0);

    let base = LIVE.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    if store {
        let kept = integrate(|p, t| field.evaluate(p, t), &p0, &cfg, true).unwrap();
        let used = PEAK.load(Ordering::SeqCst) - base;
        drop(kept);
        return used;
    }
    let grads = adjoint_from_endpoint(&field, &end, &cfg, &seed).unwrap();
    let used = PEAK.load(Ordering::SeqCst) - base;
    drop(grads);
    used
}

// One test function only: the counters are process-wide.
#[test]
fn backward_pass_memory_is_independent_of_step_count() {
    for method in SolverMethod::ALL {
        let short = peak(method, 4, false);
        let long = peak(method, 256, false);
        assert_eq!(short, long, "{method}: peak {short} bytes at 4 steps, {long} at 256");
    }
    // the hook does see growth when states are retained
    let kept_short = peak(SolverMethod::Rk4, 4, true);
    let kept_long = peak(SolverMethod::Rk4, 256, true);
    assert!(kept_long > kept_short + 200 * 4 * 8 * 8, "{kept_short} vs {kept_long}");
}
