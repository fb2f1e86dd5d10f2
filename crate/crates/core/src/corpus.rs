//! Bundled assembly programs.

pub const MICRO: &str = include_str!("../../../corpus/micro.s");
pub const TTABLE_AES: &str = include_str!("../../../corpus/ttable_aes.s");
pub const VPERM_AES: &str = include_str!("../../../corpus/vperm_aes.s");
pub const CONST_WIPE: &str = include_str!("../../../corpus/const_wipe.s");
pub const SPILL_RELOAD: &str = include_str!("../../../corpus/spill_reload.s");
pub const CTL_FLOW: &str = include_str!("../../../corpus/ctl_flow.s");

/// `(file name, source)` for every bundled program.
pub const ALL: &[(&str, &str)] = &[
    ("micro.s", MICRO),
    ("ttable_aes.s", TTABLE_AES),
    ("vperm_aes.s", VPERM_AES),
    ("const_wipe.s", CONST_WIPE),
    ("spill_reload.s", SPILL_RELOAD),
    ("ctl_flow.s", CTL_FLOW),
];

pub fn get(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|&(_, s)| s)
}
