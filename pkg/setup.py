from setuptools import setup

setup(
  name="spineage",
  packages=['spineage'],
  version="0.1.0",
  description="Spine-age estimation on synthetic spine volumes: eligibility clustering, a 3D CNN and SAG statistics",
  keywords=['spine', 'age', 'mri', 'hdbscan', 'umap', 'grad-cam'],
  classifiers=[
    "Programming Language :: Python :: 3",
    "License :: OSI Approved :: MIT License",
    "Operating System :: OS Independent",
  ],
  python_requires='>=3.8',
  install_requires=[
    'arrow',
    'python-jose',
    'psutil',
    'numpy',
    'scipy',
    'numba',
    'Pillow',
  ],
  extras_require={
    'test': ['pytest', 'scikit-learn'],
  },
  entry_points={
    'console_scripts': ['spineage = spineage.cli:main'],
  },
)
