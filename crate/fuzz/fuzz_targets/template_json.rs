#![no_main]

use libfuzzer_sys::fuzz_target;
use pavi::template::GraphTemplate;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(template) = GraphTemplate::from_json(text) {
        let json = template.to_json();
        let back = GraphTemplate::from_json(&json).expect("canonical JSON reparses");
        assert_eq!(back.to_json(), json);
    }
});
