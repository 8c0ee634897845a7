import jax

# every derivative check in this package needs double precision
jax.config.update("jax_enable_x64", True)
jax.config.update("jax_platform_name", "cpu")

import jax.numpy as jnp  # noqa: E402

__all__ = ["jax", "jnp"]
