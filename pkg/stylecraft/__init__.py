#from stylecraft import utils, data, datagen, model, diffusion, trainer, validate, explore

__version__ = "0.1.0"
