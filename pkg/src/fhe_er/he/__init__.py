"""Leveled approximate homomorphic encryption (RNS, CKKS-style)."""

from .errors import (DepthError, EncodingError, FormatError, HeError, IncompatibleError,
                     MissingKeyError, ParameterError)
from .params import DEFAULT_LEVELS, HeParams, default_params, make_params
from .scheme import (CipherVector, KeySet, Plaintext, add, add_const, const_plaintext, decode,
                     decrypt, default_rotation_steps, drop_level, encode, encrypt, inner_sum,
                     keygen, linear_combination, mul_const, mul_int, mul_relin_rescale, negate,
                     relinearize_sum, rotate, rotate_slots, square, sub)
from .serialize import dump_ciphertext, dump_keyset, load_ciphertext, load_keyset

__all__ = [
    "DepthError", "EncodingError", "FormatError", "HeError", "IncompatibleError",
    "MissingKeyError", "ParameterError", "DEFAULT_LEVELS", "HeParams", "default_params",
    "make_params", "CipherVector", "KeySet", "Plaintext", "add", "add_const",
    "const_plaintext", "decode", "decrypt", "default_rotation_steps", "drop_level", "encode",
    "encrypt", "inner_sum", "keygen", "linear_combination", "mul_const", "mul_int",
    "mul_relin_rescale", "negate", "relinearize_sum", "rotate", "rotate_slots", "square", "sub",
    "dump_ciphertext", "dump_keyset", "load_ciphertext", "load_keyset",
]
