//! Flush-to-zero for subnormal floats.
//!
//! Once a network fits its data, BCE gradients shrink toward zero and the
//! products formed in backward passes and Adam moments drift into the
//! subnormal range, where x86 arithmetic takes a microcode slow path. Training
//! holds a [`FlushDenormals`] guard so such values become zero instead.

/// Sets the FTZ and DAZ bits of the current thread's MXCSR while alive and
/// restores the previous state on drop. A no-op on other architectures.
#[derive(Debug)]
pub struct FlushDenormals {
    #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
    saved: u32,
}

#[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
mod mxcsr {
    use std::arch::asm;

    /// Flush-to-zero (bit 15) and denormals-are-zero (bit 6).
    pub const FTZ_DAZ: u32 = 0x8040;

    pub fn read() -> u32 {
        let mut csr: u32 = 0;
        // SAFETY: stmxcsr stores the 32-bit control register into `csr`.
        unsafe { asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack, preserves_flags)) };
        csr
    }

    pub fn write(csr: u32) {
        // SAFETY: ldmxcsr loads a value derived from a previous stmxcsr with
        // only the FTZ/DAZ mode bits changed.
        unsafe { asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, readonly, preserves_flags)) };
    }
}

impl FlushDenormals {
    #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
    pub fn new() -> Self {
        let saved = mxcsr::read();
        mxcsr::write(saved | mxcsr::FTZ_DAZ);
        FlushDenormals { saved }
    }

    #[cfg(not(any(target_arch = "x86", target_arch = "x86_64")))]
    pub fn new() -> Self {
        FlushDenormals {}
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
        mxcsr::write(self.saved);
    }
}
