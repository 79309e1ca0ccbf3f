#![no_main]

use libfuzzer_sys::fuzz_target;
use sade_core::trace_io::decode_trace;

fuzz_target!(|data: &[u8]| {
    let _ = decode_trace(data);
});
