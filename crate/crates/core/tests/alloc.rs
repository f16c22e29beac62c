use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

use noticetree::{Config, Key, Store, Value};

struct Counting;

thread_local! {
    static ALLOCS: Cell<u64> = const { Cell::new(0) };
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let _ = ALLOCS.try_with(|c| c.set(c.get() + 1));
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

fn allocs() -> u64 {
    ALLOCS.with(|c| c.get())
}

fn counted(f: impl FnOnce()) -> u64 {
    let before = allocs();
    f();
    allocs() - before
}

#[test]
fn blind_prepend_allocates_one_node_beyond_its_payload() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::new(dir.path());
    cfg.mapping_capacity = 1 << 12;
    cfg.auto_maintenance = false;
    cfg.consolidate_threshold = 1 << 20;
    cfg.epoch_op_interval = 1 << 40;
    let store = Store::open(cfg).unwrap();
    store.put(b"a", b"1").unwrap();
    // descending the tree: the lookup key and the path of index pages
    let traversal = counted(|| assert!(store.get(b"kez").unwrap().is_none()));
    // what the delta owns: the record's key and value
    let k = Key::new(b"key".to_vec()).unwrap();
    let payload = counted(|| {
        std::hint::black_box((k.clone(), Value::new(b"value".to_vec())));
    });
    let mut seen = Vec::new();
    for len in 0..200 {
        let n = counted(|| store.put_blind(b"key", b"value").unwrap());
        if len % 50 == 0 {
            seen.push(n);
        }
    }
    // independent of chain length, and exactly one allocation for the node
    assert!(seen.windows(2).all(|w| w[0] == w[1]), "{seen:?}");
    assert_eq!(seen[0], traversal + payload + 1, "traversal {traversal}, payload {payload}, put {seen:?}");
}
