# %% [markdown]
# # SOAP descriptors from scratch
#
# Build a small crystal, expand its neighbour densities, and check that the
# material vector ignores how the crystal is oriented, shifted or listed.

# %%
import numpy as np
from scipy.spatial.transform import Rotation

from oodmat import CrystalStructure, Lattice, SoapConfig, neighbor_list, soap_atomic
from oodmat.soap import material_descriptor

# %%
# rock-salt-like cell with a hydrogen defect
lat = Lattice(np.diag([4.2, 4.2, 4.6]))
s = CrystalStructure(lat, [[0, 0, 0], [0.5, 0.5, 0.0], [0.5, 0, 0.5], [0, 0.5, 0.5], [0.25, 0.25, 0.25]],
                     [8, 8, 14, 14, 1])
nl = neighbor_list(s, 5.0)
print("neighbours per atom:", nl.counts())

# %%
cfg = SoapConfig(species=(1, 8, 14))
atoms = soap_atomic(s, cfg, nl)
print("per-atom length", cfg.atomic_length(), "material length", cfg.material_length())
print("atoms x features:", atoms.shape)

# %%
base = material_descriptor(s, cfg)
R = Rotation.random(random_state=0).as_matrix()
rotated = CrystalStructure(Lattice(lat.rows @ R.T), s.fractional_coords, s.atomic_numbers)
shifted = CrystalStructure(lat, s.fractional_coords + [0.13, 0.71, 0.4], s.atomic_numbers)
perm = [4, 2, 0, 3, 1]
relisted = CrystalStructure(lat, s.fractional_coords[perm], s.atomic_numbers[perm])
print("rotation  max change:", np.abs(material_descriptor(rotated, cfg) - base).max())
print("shift     max change:", np.abs(material_descriptor(shifted, cfg) - base).max())
print("reorder   identical: ", np.array_equal(material_descriptor(relisted, cfg), base))

# %%
# hydrogen row: the mean over H atoms; species absent from a structure give zero rows
L = cfg.atomic_length()
print("H block norm", np.linalg.norm(base[:L]), "O block norm", np.linalg.norm(base[L:2 * L]))
