use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

use unirope::rope::FrequencyTable;
use unirope::ssd::{ssd_chunked, ssd_matrix, ssd_recurrent, RecurrentSsd, SsdInputs};
use unirope::{Rng, Tensor};

/// Records the largest single allocation made by the measuring thread.
struct Meter;

thread_local! {
    static TRACKING: Cell<bool> = const { Cell::new(false) };
    static LARGEST: Cell<usize> = const { Cell::new(0) };
}

unsafe impl GlobalAlloc for Meter {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        note(new_size);
        unsafe { System.realloc(ptr, layout, new_size) }
    }
}

fn note(size: usize) {
    let _ = TRACKING.try_with(|t| {
        if t.get() {
            let _ = LARGEST.try_with(|l| l.set(l.get().max(size)));
        }
    });
}

#[global_allocator]
static GLOBAL: Meter = Meter;

fn largest_allocation<R>(f: impl FnOnce() -> R) -> (R, usize) {
    LARGEST.with(|l| l.set(0));
    TRACKING.with(|t| t.set(true));
    let r = f();
    TRACKING.with(|t| t.set(false));
    (r, LARGEST.with(|l| l.get()))
}

const T: usize = 2048;
const N: usize = 16;
const P: usize = 8;
const SQUARE_BYTES: usize = T * T * std::mem::size_of::<f64>();

fn inputs() -> (SsdInputs, FrequencyTable) {
    let mut rng = Rng::new(3);
    let inp = SsdInputs::new(
        rng.uniform_tensor([T], 0.9, 1.0),
        rng.normal_tensor([T, N], 1.0),
        rng.normal_tensor([T, N], 1.0),
        rng.normal_tensor([T, P], 1.0),
    )
    .unwrap();
    (inp, FrequencyTable::with_max_position(N, 10_000.0, T).unwrap())
}

#[test]
fn stepwise_recurrence_allocates_only_per_token_buffers() {
    let (inp, table) = inputs();
    let mut ssd = RecurrentSsd::new(N, P);
    let (_, largest) = largest_allocation(|| {
        for t in 0..T {
            ssd.step(inp.a.data()[t], inp.b.row(t), inp.c.row(t), inp.x.row(t), Some(&table)).unwrap();
        }
    });
    assert!(largest <= 8 * N * P, "largest allocation {largest} bytes");
    assert_eq!(ssd.state_bytes(), 8 * N * P);
}

#[test]
fn recurrent_form_stays_linear_in_length() {
    let (inp, table) = inputs();
    let (y, largest) = largest_allocation(|| ssd_recurrent(&inp, &table, true).unwrap());
    assert_eq!(y.shape(), &[T, P]);
    assert!(largest <= 8 * T * N, "largest allocation {largest} bytes");
    assert!(largest < SQUARE_BYTES / 64);
}

#[test]
fn chunked_form_stays_linear_in_length() {
    let (inp, table) = inputs();
    let (y, largest) = largest_allocation(|| ssd_chunked(&inp, &table, true, 64).unwrap());
    let reference = ssd_recurrent(&inp, &table, true).unwrap();
    assert!(y.max_abs_diff(&reference) < 1e-8);
    assert!(largest <= 8 * T * N.max(64), "largest allocation {largest} bytes");
}

#[test]
fn matrix_form_is_quadratic_so_the_meter_sees_it() {
    let (inp, table) = inputs();
    let (_, largest) = largest_allocation(|| ssd_matrix(&inp, &table, true).unwrap());
    assert!(largest >= SQUARE_BYTES, "largest allocation {largest} bytes");
}

#[test]
fn meter_ignores_other_threads() {
    let (_, largest) = largest_allocation(|| std::thread::spawn(|| Tensor::zeros([1024, 1024])).join().unwrap());
    assert!(largest < 8 * 1024 * 1024);
}
