//! Subnormal flushing for the training loop.
//!
//! Confident softmax outputs and decaying optimizer moments reach the
//! subnormal range late in training; x86 cores process those operands in
//! microcode.

/// Sets flush-to-zero and denormals-are-zero on the current thread; the
/// previous mode is restored on drop. No-op off x86-64.
pub struct FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
const FTZ_DAZ: u32 = 0x8040;

#[cfg(target_arch = "x86_64")]
fn read_csr() -> u32 {
    let mut csr = 0u32;
    // SAFETY: stmxcsr stores the 32-bit MXCSR into the local.
    unsafe { std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack, preserves_flags)) };
    csr
}

#[cfg(target_arch = "x86_64")]
fn write_csr(csr: u32) {
    // SAFETY: ldmxcsr loads a value derived from the current MXCSR with only
    // the FTZ/DAZ bits changed, so no reserved bit is set.
    unsafe { std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, preserves_flags, readonly)) };
}

impl FlushSubnormals {
    pub fn enable() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            let saved = read_csr();
            write_csr(saved | FTZ_DAZ);
            FlushSubnormals { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        FlushSubnormals {}
    }
}

impl Drop for FlushSubnormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        write_csr(self.saved);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halve_smallest() -> f32 {
        std::hint::black_box(f32::MIN_POSITIVE) * std::hint::black_box(0.5f32)
    }

    #[test]
    fn subnormals_flush_inside_the_guard_only() {
        assert!(halve_smallest() > 0.0);
        {
            let _g = FlushSubnormals::enable();
            if cfg!(target_arch = "x86_64") {
                assert_eq!(halve_smallest(), 0.0);
            }
        }
        assert!(halve_smallest() > 0.0);
    }
}
