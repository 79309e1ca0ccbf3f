#![no_main]

use libfuzzer_sys::fuzz_target;
use sade_core::topology::Topology;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(topo) = Topology::from_text(&text) {
        // Accepted input survives a write/read cycle unchanged.
        let again = Topology::from_text(&topo.to_text()).expect("emitted text parses");
        assert_eq!(again.positions(), topo.positions());
    }
});
