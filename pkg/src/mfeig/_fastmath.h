/* Branch-free exp and log used by the inner-loop kernels.
 *
 * Both are written so the compiler can vectorize loops that call them.
 * fast_exp is accurate to a few ulp for x in [-700, 0]; fast_log for any
 * positive finite x (subnormals are rescaled first).
 */
#ifndef MFEIG_FASTMATH_H
#define MFEIG_FASTMATH_H

#include <stdint.h>
#include <string.h>
#include <Python.h>

static inline double mfeig_fast_exp(double x)
{
    const double log2e = 1.4426950408889634;
    const double ln2hi = 6.93147180369123816490e-01;
    const double ln2lo = 1.90821492927058770002e-10;
    const double shift = 6755399441055744.0; /* 1.5 * 2^52: rounds to integer */
    double kd = x * log2e + shift;
    double k = kd - shift;
    double r = (x - k * ln2hi) - k * ln2lo;
    double p = 1.0 / 6227020800.0;
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    int64_t bits;
    memcpy(&bits, &kd, 8);
    int64_t e = (bits + 1023) << 52;
    double scale;
    memcpy(&scale, &e, 8);
    return p * scale;
}

static inline double mfeig_fast_log(double x)
{
    const double ln2hi = 6.93147180369123816490e-01;
    const double ln2lo = 1.90821492927058770002e-10;
    const double sqrt2 = 1.4142135623730951;
    /* lift subnormals into the normal range */
    int tiny = x < 2.2250738585072014e-308;
    double xs = tiny ? x * 1.2676506002282294e30 : x; /* 2^100 */
    int64_t bits;
    memcpy(&bits, &xs, 8);
    double e = (double)(((bits >> 52) & 0x7ff) - 1023) - (tiny ? 100.0 : 0.0);
    int64_t mbits = (bits & 0x000fffffffffffffLL) | 0x3ff0000000000000LL;
    double m;
    memcpy(&m, &mbits, 8);
    int big = m > sqrt2;
    m = big ? 0.5 * m : m;
    e = big ? e + 1.0 : e;
    double s = (m - 1.0) / (m + 1.0);
    double s2 = s * s;
    double p = 1.0 / 21.0;
    p = p * s2 + 1.0 / 19.0;
    p = p * s2 + 1.0 / 17.0;
    p = p * s2 + 1.0 / 15.0;
    p = p * s2 + 1.0 / 13.0;
    p = p * s2 + 1.0 / 11.0;
    p = p * s2 + 1.0 / 9.0;
    p = p * s2 + 1.0 / 7.0;
    p = p * s2 + 1.0 / 5.0;
    p = p * s2 + 1.0 / 3.0;
    double lm = 2.0 * s + 2.0 * s * s2 * p;
    return e * ln2hi + (e * ln2lo + lm);
}

/* 2^(i/64), i = 0..63, correctly rounded */
static const double MFEIG_EXP2_TAB[64] = {
    1.0,
    1.0108892860517005,
    1.0218971486541166,
    1.0330248790212284,
    1.0442737824274138,
    1.0556451783605572,
    1.0671404006768237,
    1.0787607977571199,
    1.0905077326652577,
    1.102382583307841,
    1.1143867425958924,
    1.1265216186082418,
    1.1387886347566916,
    1.1511892299529827,
    1.1637248587775775,
    1.1763969916502812,
    1.189207115002721,
    1.202156731452703,
    1.215247359980469,
    1.22848053610687,
    1.241857812073484,
    1.255380757024691,
    1.2690509571917332,
    1.2828700160787783,
    1.2968395546510096,
    1.3109612115247644,
    1.3252366431597413,
    1.339667524053303,
    1.3542555469368927,
    1.3690024229745905,
    1.383909881963832,
    1.3989796725383112,
    1.4142135623730951,
    1.42961333839197,
    1.4451808069770467,
    1.460917794180647,
    1.4768261459394993,
    1.4929077282912648,
    1.5091644275934228,
    1.5255981507445384,
    1.5422108254079407,
    1.559004400237837,
    1.5759808451078865,
    1.593142151342267,
    1.6104903319492543,
    1.6280274218573478,
    1.645755478153965,
    1.6636765803267364,
    1.681792830507429,
    1.7001063537185235,
    1.718619298122478,
    1.7373338352737062,
    1.7562521603732995,
    1.7753764925265212,
    1.7947090750031072,
    1.8142521755003989,
    1.8340080864093424,
    1.8539791250833855,
    1.8741676341103,
    1.8945759815869656,
    1.9152065613971474,
    1.9360617934922943,
    1.9571441241754002,
    1.978456026387951
};

/* Table-driven exp for x in [-700, 0]: 2^(k/64) from the table times a
 * degree-5 polynomial on |r| <= ln2/128. Relative error about 2e-16. */
static inline double mfeig_table_exp(double x)
{
    const double c = 92.33248261689366;             /* 64 / ln2 */
    const double l2h = 0.010830424696223417;        /* ln2 / 64, high part */
    const double l2l = 2.5728046223276688e-14;      /* low part */
    const double shift = 6755399441055744.0;
    double kd = x * c + shift;
    double k = kd - shift;
    int64_t bits;
    memcpy(&bits, &kd, 8);
    double r = (x - k * l2h) - k * l2l;
    double p = r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0)))));
    int64_t e = ((bits >> 6) + 1023) << 52;
    double sc;
    memcpy(&sc, &e, 8);
    double t = MFEIG_EXP2_TAB[bits & 63];
    return sc * (t + t * p);
}

/* Sort values in (0, 1) ascending: bucket scatter then insertion sort,
 * expected linear time for uniformly spread input. tmp and bucket need
 * room for n and n + 1 entries. */
static inline void mfeig_sort_unit(double* u, Py_ssize_t n, double* tmp, Py_ssize_t* bucket)
{
    Py_ssize_t i, j, b;
    double v;
    for (i = 0; i <= n; i++) bucket[i] = 0;
    for (i = 0; i < n; i++) {
        b = (Py_ssize_t)(u[i] * (double)n);
        b = b < 0 ? 0 : (b >= n ? n - 1 : b);
        bucket[b + 1]++;
    }
    for (i = 0; i < n; i++) bucket[i + 1] += bucket[i];
    for (i = 0; i < n; i++) {
        b = (Py_ssize_t)(u[i] * (double)n);
        b = b < 0 ? 0 : (b >= n ? n - 1 : b);
        tmp[bucket[b]++] = u[i];
    }
    for (i = 1; i < n; i++) {
        v = tmp[i];
        j = i - 1;
        while (j >= 0 && tmp[j] > v) {
            tmp[j + 1] = tmp[j];
            j--;
        }
        tmp[j + 1] = v;
    }
    for (i = 0; i < n; i++) u[i] = tmp[i];
}

#endif
