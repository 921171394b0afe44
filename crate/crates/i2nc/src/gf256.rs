//! GF(2^8) arithmetic over the AES-adjacent polynomial x^8+x^4+x^3+x^2+1 (0x11d),
//! the field conventionally used for byte-oriented erasure codes. Addition is XOR;
//! multiplication goes through log/exp tables built at compile time.

const POLY: u32 = 0x11d;

const fn build_tables() -> ([u8; 512], [u8; 256]) {
    let mut exp = [0u8; 512];
    let mut log = [0u8; 256];
    let mut x: u32 = 1;
    let mut i = 0;
    while i < 255 {
        exp[i] = x as u8;
        log[x as usize] = i as u8;
        x <<= 1;
        if x & 0x100 != 0 {
            x ^= POLY;
        }
        i += 1;
    }
    // Mirror the cycle so mul can index log[a]+log[b] without reducing mod 255.
    let mut j = 255;
    while j < 512 {
        exp[j] = exp[j - 255];
        j += 1;
    }
    (exp, log)
}

static TABLES: ([u8; 512], [u8; 256]) = build_tables();

#[inline]
pub fn add(a: u8, b: u8) -> u8 {
    a ^ b
}

#[inline]
pub fn mul(a: u8, b: u8) -> u8 {
    if a == 0 || b == 0 {
        0
    } else {
        let (exp, log) = (&TABLES.0, &TABLES.1);
        exp[log[a as usize] as usize + log[b as usize] as usize]
    }
}

/// Multiplicative inverse. Panics on 0.
#[inline]
pub fn inv(a: u8) -> u8 {
    assert_ne!(a, 0, "0 has no inverse in GF(2^8)");
    let (exp, log) = (&TABLES.0, &TABLES.1);
    exp[255 - log[a as usize] as usize]
}

#[inline]
pub fn div(a: u8, b: u8) -> u8 {
    mul(a, inv(b))
}

/// `dst ^= c * src`, element-wise. The workhorse of row elimination.
pub fn mul_slice_xor(dst: &mut [u8], src: &[u8], c: u8) {
    debug_assert_eq!(dst.len(), src.len());
    if c == 0 {
        return;
    }
    if c == 1 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d ^= s;
        }
        return;
    }
    let (exp, log) = (&TABLES.0, &TABLES.1);
    let lc = log[c as usize] as usize;
    for (d, s) in dst.iter_mut().zip(src) {
        if *s != 0 {
            *d ^= exp[lc + log[*s as usize] as usize];
        }
    }
}

/// `dst *= c`, element-wise.
pub fn scale_slice(dst: &mut [u8], c: u8) {
    if c == 1 {
        return;
    }
    for d in dst.iter_mut() {
        *d = mul(*d, c);
    }
}
